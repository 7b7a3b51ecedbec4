//! Eager neural-network kernels shared by the tape and by direct callers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::rng::RngState;
use crate::tensor::{dot, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const LN_EPS: f64 = 1e-5;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> BatchNormStats<F> {
    pub fn new(width: usize) -> Self {
        BatchNormStats {
            mean: vec![F::zero(); width],
            var: vec![F::one(); width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

/// Normalized activations plus the per-column inverse std used by the adjoint.
pub(crate) struct NormOut<F> {
    pub out: Tensor<F>,
    pub inv_std: Vec<F>,
}

/// Batch-statistics normalization; updates `stats` with momentum [`BN_MOMENTUM`].
pub(crate) fn batch_norm_train<F: Scalar>(
    h: &Tensor<F>,
    stats: &mut BatchNormStats<F>,
) -> Result<NormOut<F>> {
    let (b, d) = (h.rows(), h.cols());
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch norm in training mode needs at least 2 rows, got {b}"
        )));
    }
    if d != stats.width() {
        return Err(Error::dims("batch_norm", h.dims(), &[stats.width()]));
    }
    let bf = F::of(b as f64);
    let mut mean = vec![F::zero(); d];
    for i in 0..b {
        for (m, &v) in mean.iter_mut().zip(h.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= bf);
    let mut var = vec![F::zero(); d];
    for i in 0..b {
        for ((s, &v), &m) in var.iter_mut().zip(h.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= bf);
    let eps = F::of(BN_EPS);
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut out = h.clone();
    for i in 0..b {
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (*o - mean[j]) * inv_std[j];
        }
    }
    let keep = F::of(BN_MOMENTUM);
    let unbias = bf / (bf - F::one());
    for j in 0..d {
        stats.mean[j] = keep * stats.mean[j] + (F::one() - keep) * mean[j];
        stats.var[j] = keep * stats.var[j] + (F::one() - keep) * var[j] * unbias;
    }
    Ok(NormOut { out, inv_std })
}

/// Running-statistics normalization (a fixed per-column affine map).
pub(crate) fn batch_norm_eval<F: Scalar>(
    h: &Tensor<F>,
    stats: &BatchNormStats<F>,
) -> Result<NormOut<F>> {
    let d = h.cols();
    if d != stats.width() {
        return Err(Error::dims("batch_norm", h.dims(), &[stats.width()]));
    }
    let eps = F::of(BN_EPS);
    let inv_std: Vec<F> = stats
        .var
        .iter()
        .map(|&v| F::one() / (v + eps).sqrt())
        .collect();
    let mut out = h.clone();
    for i in 0..h.rows() {
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (*o - stats.mean[j]) * inv_std[j];
        }
    }
    Ok(NormOut { out, inv_std })
}

/// Batch normalization without a learned affine; the block's fusion step supplies one.
pub fn batch_norm<F: Scalar>(
    h: &Tensor<F>,
    stats: &mut BatchNormStats<F>,
    training: bool,
) -> Result<Tensor<F>> {
    let r = if training {
        batch_norm_train(h, stats)?
    } else {
        batch_norm_eval(h, stats)?
    };
    debug_assert!(r.out.is_finite());
    Ok(r.out)
}

/// Inverted-dropout mask with entries in `{0, 1/(1-p)}`.
pub fn dropout_mask<F: Scalar>(dims: &[usize], p: f64, rng: &mut RngState) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(Tensor::ones(dims));
    }
    let keep = F::of(1.0 / (1.0 - p));
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| if rng.uniform() < p { F::zero() } else { keep })
        .collect();
    Ok(Tensor::from_parts(dims.to_vec(), data))
}

/// Per-row normalization over features.
pub(crate) fn layer_norm<F: Scalar>(h: &Tensor<F>) -> NormOut<F> {
    let (b, d) = (h.rows(), h.cols());
    let df = F::of(d as f64);
    let eps = F::of(LN_EPS);
    let mut out = h.clone();
    let mut inv_std = Vec::with_capacity(b);
    for i in 0..b {
        let row = out.row_mut(i);
        let mean = row.iter().copied().sum::<F>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
        let is = F::one() / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
    }
    NormOut { out, inv_std }
}

/// Row-wise softmax, in place.
pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let mut z = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

pub fn softmax_rows<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Layout of a token batch: `samples · tokens` rows, `heads · head_dim` columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub samples: usize,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionShape {
    pub fn infer<F: Scalar>(q: &Tensor<F>, tokens: usize, heads: usize) -> Result<Self> {
        let (rows, width) = (q.rows(), q.cols());
        if tokens == 0 || rows % tokens != 0 || heads == 0 || width % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention over {rows}x{width} with {tokens} tokens and {heads} heads"
            )));
        }
        Ok(AttentionShape {
            samples: rows / tokens,
            tokens,
            heads,
            head_dim: width / heads,
        })
    }

    fn prob_offset(&self, sample: usize, head: usize) -> usize {
        (sample * self.heads + head) * self.tokens * self.tokens
    }
}

/// Scaled dot-product self-attention per sample and head.
///
/// Returns the mixed values and the attention probabilities laid out as
/// `[samples, heads, tokens, tokens]`.
pub fn attention_forward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    shape: AttentionShape,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if q.dims() != k.dims() || q.dims() != v.dims() {
        return Err(Error::dims("attention", q.dims(), k.dims()));
    }
    let AttentionShape {
        samples,
        tokens: n,
        heads,
        head_dim: dh,
    } = shape;
    let width = heads * dh;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut probs = vec![F::zero(); samples * heads * n * n];
    let mut out = vec![F::zero(); q.len()];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for s in 0..samples {
        for h in 0..heads {
            let base = shape.prob_offset(s, h);
            let col = h * dh;
            for i in 0..n {
                let qi = &qd[(s * n + i) * width + col..][..dh];
                let p = &mut probs[base + i * n..base + (i + 1) * n];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &kd[(s * n + j) * width + col..][..dh];
                    *pj = dot(qi, kj) * scale;
                }
                softmax_in_place(p);
                let o = &mut out[(s * n + i) * width + col..][..dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vd[(s * n + j) * width + col..][..dh];
                    for (o, &x) in o.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(q.dims().to_vec(), out),
        Tensor::from_parts(vec![samples, heads, n, n], probs),
    ))
}

/// Adjoints of [`attention_forward`] with respect to `q`, `k`, `v`.
pub(crate) fn attention_backward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    probs: &Tensor<F>,
    grad_out: &Tensor<F>,
    shape: AttentionShape,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let AttentionShape {
        samples,
        tokens: n,
        heads,
        head_dim: dh,
    } = shape;
    let width = heads * dh;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut gq = vec![F::zero(); q.len()];
    let mut gk = vec![F::zero(); k.len()];
    let mut gv = vec![F::zero(); v.len()];
    let (qd, kd, vd, god, pd) = (q.data(), k.data(), v.data(), grad_out.data(), probs.data());
    let mut dp = vec![F::zero(); n];
    for s in 0..samples {
        for h in 0..heads {
            let base = shape.prob_offset(s, h);
            let col = h * dh;
            for i in 0..n {
                let p = &pd[base + i * n..base + (i + 1) * n];
                let go = &god[(s * n + i) * width + col..][..dh];
                for j in 0..n {
                    let r = (s * n + j) * width + col;
                    dp[j] = dot(go, &vd[r..r + dh]);
                    for (g, &x) in gv[r..r + dh].iter_mut().zip(go) {
                        *g += p[j] * x;
                    }
                }
                let inner = dot(p, &dp);
                let qi_off = (s * n + i) * width + col;
                for j in 0..n {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    let r = (s * n + j) * width + col;
                    for c in 0..dh {
                        gq[qi_off + c] += ds * kd[r + c];
                        gk[r + c] += ds * qd[qi_off + c];
                    }
                }
            }
        }
    }
    let dims = q.dims().to_vec();
    (
        Tensor::from_parts(dims.clone(), gq),
        Tensor::from_parts(dims.clone(), gk),
        Tensor::from_parts(dims, gv),
    )
}
