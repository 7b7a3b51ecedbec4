//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so index order is a topological
//! order and the backward sweep is a single reverse pass.

use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::nn::{self, AttentionShape, BatchNormStats};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    AddBias(Var, Var),
    AddTiled(Var, Var),
    ScaleRows(Var, Vec<F>),
    Relu(Var),
    /// `out = x̂` with per-column `inv_std`; batch statistics feed the adjoint.
    BatchNormTrain(Var, Vec<F>),
    /// Fixed per-column affine map.
    ColumnScale(Var, Vec<F>),
    LayerNorm(Var, Vec<F>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Tensor<F>,
        shape: AttentionShape,
    },
    GroupMeanRows(Var, usize),
    MaskRows {
        cond: Var,
        null: Var,
        mask: Vec<bool>,
    },
    TileRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    trainable: bool,
}

pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded handle, in evaluation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "tape op produced a non-finite value");
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            trainable: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a), &[a])
    }

    /// `[b×n] + [n]`, the bias added to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if x.cols() != b.len() {
            return Err(Error::dims("add_bias", x.dims(), b.dims()));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    /// `[(s·n)×d] + [n×d]`: the tile is repeated for every group of `n` rows.
    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Result<Var> {
        let (x, t) = (self.value(a), self.value(tile));
        if x.cols() != t.cols() || x.rows() % t.rows() != 0 {
            return Err(Error::dims("add_tiled", x.dims(), t.dims()));
        }
        let mut out = x.clone();
        let n = t.rows();
        for i in 0..out.rows() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(t.row(i % n)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::AddTiled(a, tile), &[a, tile]))
    }

    /// Multiply row `i` by the constant `coeffs[i]`.
    pub fn scale_rows(&mut self, a: Var, coeffs: Vec<F>) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != coeffs.len() {
            return Err(Error::dims("scale_rows", x.dims(), &[coeffs.len()]));
        }
        let mut out = x.clone();
        for (i, &c) in coeffs.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= c);
        }
        Ok(self.push(out, Op::ScaleRows(a, coeffs), &[a]))
    }

    pub fn batch_norm(
        &mut self,
        a: Var,
        stats: &mut BatchNormStats<F>,
        training: bool,
    ) -> Result<Var> {
        if training {
            let r = nn::batch_norm_train(self.value(a), stats)?;
            Ok(self.push(r.out, Op::BatchNormTrain(a, r.inv_std), &[a]))
        } else {
            let r = nn::batch_norm_eval(self.value(a), stats)?;
            Ok(self.push(r.out, Op::ColumnScale(a, r.inv_std), &[a]))
        }
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let r = nn::layer_norm(self.value(a));
        self.push(r.out, Op::LayerNorm(a, r.inv_std), &[a])
    }

    /// Multi-head self-attention over `tokens`-row groups.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
    ) -> Result<Var> {
        let shape = AttentionShape::infer(self.value(q), tokens, heads)?;
        let (out, probs) =
            nn::attention_forward(self.value(q), self.value(k), self.value(v), shape)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                shape,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&Tensor<F>> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over consecutive groups of `group` rows: `[(s·g)×d] → [s×d]`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        if group == 0 || !x.rows().is_multiple_of(group) {
            return Err(Error::dims("group_mean_rows", x.dims(), &[group]));
        }
        let (s, d) = (x.rows() / group, x.cols());
        let inv = F::of(1.0 / group as f64);
        let mut out = Tensor::zeros(&[s, d]);
        for i in 0..x.rows() {
            let src = x.row(i);
            for (o, &v) in out.row_mut(i / group).iter_mut().zip(src) {
                *o += v * inv;
            }
        }
        Ok(self.push(out, Op::GroupMeanRows(a, group), &[a]))
    }

    /// Replace rows of `cond` flagged in `mask` by the vector `null`.
    pub fn mask_rows(&mut self, cond: Var, null: Var, mask: &[bool]) -> Result<Var> {
        let (c, n) = (self.value(cond), self.value(null));
        if c.rows() != mask.len() || c.cols() != n.len() {
            return Err(Error::dims("mask_rows", c.dims(), n.dims()));
        }
        let mut out = c.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(i).copy_from_slice(n.data());
            }
        }
        Ok(self.push(
            out,
            Op::MaskRows {
                cond,
                null,
                mask: mask.to_vec(),
            },
            &[cond, null],
        ))
    }

    /// Repeat a vector as `rows` identical rows.
    pub fn tile_rows(&mut self, v: Var, rows: usize) -> Var {
        let x = self.value(v);
        let d = x.len();
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(x.data());
        }
        self.push(
            Tensor::from_parts(vec![rows, d], data),
            Op::TileRows(v),
            &[v],
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, F::of(1.0 / n as f64))
    }

    /// Mean softmax cross-entropy of `logits: [b×c]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (b, c) = (x.rows(), x.cols());
        if labels.len() != b {
            return Err(Error::dims("cross_entropy", x.dims(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                n_classes: c,
            });
        }
        let mut loss = F::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = x.row(i);
            let m = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<F>().ln() + m;
            loss += lse - row[y];
        }
        loss /= F::of(b as f64);
        let probs = nn::softmax_rows(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.dims(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.dims(loss).to_vec(), vec![F::one()]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.dims()));
                debug_assert!(g.is_finite(), "non-finite gradient");
                out.push((Var(idx), g));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(
        &self,
        op: &Op<F>,
        value: &Tensor<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul_nt(self.value(*b))?;
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.value(*a).matmul_tn(g)?;
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.scale(-F::one()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, g.hadamard(vb)?);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.hadamard(va)?);
                }
            }
            Op::Scale(a, s) => self.send(grads, *a, || g.scale(*s)),
            Op::AddScalar(a) => self.send(grads, *a, || g.clone()),
            Op::AddBias(a, bias) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *bias, || {
                    let mut gb = Tensor::zeros(self.dims(*bias));
                    for i in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    gb
                });
            }
            Op::AddTiled(a, tile) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *tile, || {
                    let mut gt = Tensor::zeros(self.dims(*tile));
                    let n = gt.rows();
                    for i in 0..g.rows() {
                        for (o, &v) in gt.row_mut(i % n).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    gt
                });
            }
            Op::ScaleRows(a, coeffs) => self.send(grads, *a, || {
                let mut out = g.clone();
                for (i, &c) in coeffs.iter().enumerate() {
                    out.row_mut(i).iter_mut().for_each(|v| *v *= c);
                }
                out
            }),
            Op::Relu(a) => self.send(grads, *a, || {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                Tensor::from_parts(g.dims().to_vec(), data)
            }),
            Op::BatchNormTrain(a, inv_std) => {
                self.send(grads, *a, || batch_norm_adjoint(value, g, inv_std))
            }
            Op::ColumnScale(a, scale) => self.send(grads, *a, || {
                let mut out = g.clone();
                for i in 0..out.rows() {
                    for (o, &s) in out.row_mut(i).iter_mut().zip(scale) {
                        *o *= s;
                    }
                }
                out
            }),
            Op::LayerNorm(a, inv_std) => {
                self.send(grads, *a, || layer_norm_adjoint(value, g, inv_std))
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                shape,
            } => {
                let (gq, gk, gv) = nn::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    *shape,
                );
                if self.needs(*q) {
                    accumulate(grads, *q, gq);
                }
                if self.needs(*k) {
                    accumulate(grads, *k, gk);
                }
                if self.needs(*v) {
                    accumulate(grads, *v, gv);
                }
            }
            Op::GroupMeanRows(a, group) => self.send(grads, *a, || {
                let inv = F::of(1.0 / *group as f64);
                let x = self.value(*a);
                let mut out = Tensor::zeros(x.dims());
                for i in 0..x.rows() {
                    for (o, &v) in out.row_mut(i).iter_mut().zip(g.row(i / group)) {
                        *o = v * inv;
                    }
                }
                out
            }),
            Op::MaskRows { cond, null, mask } => {
                self.send(grads, *cond, || {
                    let mut out = g.clone();
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            out.row_mut(i).iter_mut().for_each(|v| *v = F::zero());
                        }
                    }
                    out
                });
                self.send(grads, *null, || {
                    let mut out = Tensor::zeros(self.dims(*null));
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for (o, &v) in out.data_mut().iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    }
                    out
                });
            }
            Op::TileRows(v) => self.send(grads, *v, || {
                let mut out = Tensor::zeros(self.dims(*v));
                for i in 0..g.rows() {
                    for (o, &x) in out.data_mut().iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                out
            }),
            Op::Sum(a) => self.send(grads, *a, || Tensor::full(self.dims(*a), g.data()[0])),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => self.send(grads, *logits, || {
                let scale = g.data()[0] / F::of(labels.len() as f64);
                let mut out = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    out.row_mut(i)[y] -= F::one();
                    out.row_mut(i).iter_mut().for_each(|v| *v *= scale);
                }
                out
            }),
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor<F>>], to: Var, g: impl FnOnce() -> Tensor<F>) {
        if self.needs(to) {
            accumulate(grads, to, g());
        }
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], to: Var, g: Tensor<F>) {
    match &mut grads[to.0] {
        Some(existing) => {
            for (e, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// `dx = inv_std/b · (b·dy − Σdy − x̂·Σ(dy·x̂))`, per column.
fn batch_norm_adjoint<F: Scalar>(xhat: &Tensor<F>, g: &Tensor<F>, inv_std: &[F]) -> Tensor<F> {
    let (b, d) = (g.rows(), g.cols());
    let bf = F::of(b as f64);
    let mut sum_g = vec![F::zero(); d];
    let mut sum_gx = vec![F::zero(); d];
    for i in 0..b {
        for j in 0..d {
            let gv = g.row(i)[j];
            sum_g[j] += gv;
            sum_gx[j] += gv * xhat.row(i)[j];
        }
    }
    let mut out = Tensor::zeros(g.dims());
    for i in 0..b {
        let (gr, xr) = (g.row(i), xhat.row(i));
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = inv_std[j] / bf * (bf * gr[j] - sum_g[j] - xr[j] * sum_gx[j]);
        }
    }
    out
}

/// Same reduction as batch norm, taken along each row.
fn layer_norm_adjoint<F: Scalar>(xhat: &Tensor<F>, g: &Tensor<F>, inv_std: &[F]) -> Tensor<F> {
    let d = g.cols();
    let df = F::of(d as f64);
    let mut out = Tensor::zeros(g.dims());
    for (i, &is) in inv_std.iter().enumerate() {
        let (gr, xr) = (g.row(i), xhat.row(i));
        let sg: F = gr.iter().copied().sum();
        let sgx: F = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = is / df * (df * gr[j] - sg - xr[j] * sgx);
        }
    }
    out
}

/// Gradients of trainable leaves, in tape order.
pub struct Gradients<F> {
    grads: Vec<(Var, Tensor<F>)>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads
            .binary_search_by_key(&v, |(var, _)| *var)
            .ok()
            .map(|i| &self.grads[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<F>)> {
        self.grads.iter().map(|(v, g)| (*v, g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
