//! The conditional denoiser `s_θ(s_t, t, x)` and the seen-class classifier head.
//!
//! Encoder blocks inject time by Hadamard product and the visual condition by
//! addition; decoder blocks swap the two roles. Each decoder block receives the
//! mirrored encoder activation through an additive skip connection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::nn::{dropout_mask, BatchNormStats};
use crate::rng::RngState;
use crate::schedule::TimeEmbeddingSpec;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub d_s: usize,
    pub d_x: usize,
    /// Encoder widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    /// Width of the encoded condition (the attention model width).
    pub cond_dim: usize,
    pub n_heads: usize,
    pub n_tokens: usize,
    pub dropout: f64,
    pub n_seen_classes: usize,
}

impl DenoiserConfig {
    /// Defaults for `d_s`/`d_x`-sized data with `n_seen` training classes.
    pub fn for_dims(d_s: usize, d_x: usize, n_seen: usize) -> Self {
        DenoiserConfig {
            d_s,
            d_x,
            hidden: vec![512, 256, 128],
            time_dim: 128,
            cond_dim: 128,
            n_heads: 4,
            n_tokens: 16,
            dropout: 0.1,
            n_seen_classes: n_seen,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_s == 0 || self.d_x == 0 || self.n_seen_classes == 0 {
            return fail("d_s, d_x and n_seen_classes must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail(format!(
                "hidden widths must be non-empty and positive: {:?}",
                self.hidden
            ));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return fail(format!("time_dim must be even, got {}", self.time_dim));
        }
        if self.n_tokens == 0 || !self.d_x.is_multiple_of(self.n_tokens) {
            return fail(format!(
                "d_x = {} is not divisible by n_tokens = {}",
                self.d_x, self.n_tokens
            ));
        }
        if self.n_heads == 0 || !self.cond_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "cond_dim = {} is not divisible by n_heads = {}",
                self.cond_dim, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    fn token_width(&self) -> usize {
        self.d_x / self.n_tokens
    }

    /// Output widths of the decoder blocks, bottleneck first.
    pub fn decoder_widths(&self) -> Vec<usize> {
        self.hidden.iter().rev().copied().collect()
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Parameter groups used to reason about gradient flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Layers,
    TimeProjections,
    CondProjections,
    ConditionEncoder,
    NullEmbedding,
    Classifier,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name == "null" {
            ParamGroup::NullEmbedding
        } else if name.starts_with("msa.") {
            ParamGroup::ConditionEncoder
        } else if name.starts_with("cls.") {
            ParamGroup::Classifier
        } else if name.contains(".time.") {
            ParamGroup::TimeProjections
        } else if name.contains(".cond.") {
            ParamGroup::CondProjections
        } else {
            ParamGroup::Layers
        }
    }
}

/// Parameters registered on a tape for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    /// Tape handles in parameter-store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// How a forward pass treats batch norm and dropout.
pub enum Mode<'r> {
    /// Batch statistics, running-stat updates, dropout drawn from the stream.
    Train(&'r mut RngState),
    /// Running statistics, no dropout.
    Eval,
}

impl Mode<'_> {
    fn training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Which encoder/decoder rule fuses time and condition into a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// `h ⊙ proj_t(t̄) + proj_c(c)`
    TimeGate,
    /// `h ⊙ proj_c(c) + proj_t(t̄)`
    CondGate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<F: Scalar> {
    pub config: DenoiserConfig,
    pub params: ParamStore<F>,
    /// Running statistics: encoder blocks first, then decoder blocks.
    pub bn: Vec<BatchNormStats<F>>,
    time: TimeEmbeddingSpec,
    max_t: usize,
    /// Fusion rules for the encoder and decoder blocks.
    pub fusion: (Fusion, Fusion),
}

fn init_weight<F: Scalar>(
    rng: &mut RngState,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> Tensor<F> {
    let std = gain / (fan_in as f64).sqrt();
    rng.gaussian::<F>(&[fan_in, fan_out]).scale(F::of(std))
}

impl<F: Scalar> Denoiser<F> {
    /// Fresh parameters for a chain of `max_t` steps.
    pub fn new(config: DenoiserConfig, max_t: usize, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let time = TimeEmbeddingSpec::new(config.time_dim, max_t)?;
        let mut p = ParamStore::default();
        let c = &config;
        let (dc, dt) = (c.cond_dim, c.time_dim);

        p.insert("msa.embed.w", init_weight(rng, c.token_width(), dc, 1.0));
        p.insert("msa.embed.b", Tensor::zeros(&[dc]));
        p.insert(
            "msa.pos",
            rng.gaussian::<F>(&[c.n_tokens, dc]).scale(F::of(0.1)),
        );
        for name in ["msa.q.w", "msa.k.w", "msa.v.w", "msa.o.w"] {
            p.insert(name, init_weight(rng, dc, dc, 1.0));
        }
        p.insert("msa.o.b", Tensor::zeros(&[dc]));
        p.insert("msa.ff1.w", init_weight(rng, dc, 2 * dc, 2f64.sqrt()));
        p.insert("msa.ff1.b", Tensor::zeros(&[2 * dc]));
        p.insert("msa.ff2.w", init_weight(rng, 2 * dc, dc, 1.0));
        p.insert("msa.ff2.b", Tensor::zeros(&[dc]));
        p.insert("null", rng.gaussian::<F>(&[dc]).scale(F::of(0.1)));

        // Gating projections start near the identity gate (bias 1, small weights).
        let mut block =
            |p: &mut ParamStore<F>, prefix: String, fan_in: usize, width: usize, gate: &str| {
                p.insert(
                    format!("{prefix}.w"),
                    init_weight(rng, fan_in, width, 2f64.sqrt()),
                );
                p.insert(format!("{prefix}.b"), Tensor::zeros(&[width]));
                for (kind, d_in) in [("time", dt), ("cond", dc)] {
                    let gain = if kind == gate { 0.1 } else { 1.0 };
                    let bias = if kind == gate { F::one() } else { F::zero() };
                    p.insert(
                        format!("{prefix}.{kind}.w"),
                        init_weight(rng, d_in, width, gain),
                    );
                    p.insert(format!("{prefix}.{kind}.b"), Tensor::full(&[width], bias));
                }
            };
        let mut width_in = c.d_s;
        for (i, &w) in c.hidden.iter().enumerate() {
            block(&mut p, format!("enc.{i}"), width_in, w, "time");
            width_in = w;
        }
        for (i, w) in c.decoder_widths().into_iter().enumerate() {
            block(&mut p, format!("dec.{i}"), width_in, w, "cond");
            width_in = w;
        }
        p.insert("out.w", init_weight(rng, width_in, c.d_s, 1.0));
        p.insert("out.b", Tensor::zeros(&[c.d_s]));
        p.insert("cls.w", init_weight(rng, c.d_s, c.n_seen_classes, 1.0));
        p.insert("cls.b", Tensor::zeros(&[c.n_seen_classes]));

        let bn = c
            .hidden
            .iter()
            .chain(c.decoder_widths().iter())
            .map(|&w| BatchNormStats::new(w))
            .collect();
        Ok(Denoiser {
            config,
            params: p,
            bn,
            time,
            max_t,
            fusion: (Fusion::TimeGate, Fusion::CondGate),
        })
    }

    pub fn max_t(&self) -> usize {
        self.max_t
    }

    pub fn time_embedding(&self) -> &TimeEmbeddingSpec {
        &self.time
    }

    /// Register every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Register parameters as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.params.index.clone(),
        }
    }

    fn linear(&self, tape: &mut Tape<F>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let h = tape.matmul(x, p.var(&format!("{prefix}.w")))?;
        tape.add_bias(h, p.var(&format!("{prefix}.b")))
    }

    /// Multi-head self-attention encoding of `x: [b×d_x]` into `[b×cond_dim]`.
    ///
    /// The feature vector is cut into `n_tokens` equal chunks that form the
    /// token sequence; the block output is mean-pooled over tokens.
    pub fn encode_condition(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let c = &self.config;
        let xv = tape.value(x);
        if xv.dims().len() != 2 || xv.cols() != c.d_x {
            return Err(Error::dims("encode_condition", xv.dims(), &[c.d_x]));
        }
        let b = xv.rows();
        let tokens = xv.clone().reshape(&[b * c.n_tokens, c.token_width()])?;
        let tok = tape.constant(tokens);
        let e = self.linear(tape, p, tok, "msa.embed")?;
        let e = tape.add_tiled(e, p.var("msa.pos"))?;
        let q = tape.matmul(e, p.var("msa.q.w"))?;
        let k = tape.matmul(e, p.var("msa.k.w"))?;
        let v = tape.matmul(e, p.var("msa.v.w"))?;
        let a = tape.attention(q, k, v, c.n_tokens, c.n_heads)?;
        let o = self.linear(tape, p, a, "msa.o")?;
        let h = tape.add(e, o)?;
        let h = tape.layer_norm(h);
        let f = self.linear(tape, p, h, "msa.ff1")?;
        let f = tape.relu(f);
        let f = self.linear(tape, p, f, "msa.ff2")?;
        let h = tape.add(h, f)?;
        let h = tape.layer_norm(h);
        tape.group_mean_rows(h, c.n_tokens)
    }

    /// The learned null-condition embedding as one row per sample.
    pub fn null_condition(&self, tape: &mut Tape<F>, p: &Bound, rows: usize) -> Var {
        tape.tile_rows(p.var("null"), rows)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        tape: &mut Tape<F>,
        p: &Bound,
        h: Var,
        prefix: &str,
        bn_index: usize,
        fusion: Fusion,
        skip: Option<Var>,
        time: Var,
        cond: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let h = self.linear(tape, p, h, prefix)?;
        let training = mode.training();
        let h = tape.batch_norm(h, &mut self.bn[bn_index], training)?;
        let mut h = tape.relu(h);
        if let Some(s) = skip {
            h = tape.add(h, s)?;
        }
        let pt = self.linear(tape, p, time, &format!("{prefix}.time"))?;
        let pc = self.linear(tape, p, cond, &format!("{prefix}.cond"))?;
        let (gate, shift) = match fusion {
            Fusion::TimeGate => (pt, pc),
            Fusion::CondGate => (pc, pt),
        };
        let h = tape.mul(h, gate)?;
        let h = tape.add(h, shift)?;
        match mode {
            Mode::Train(rng) if self.config.dropout > 0.0 => {
                let mask = dropout_mask(tape.dims(h), self.config.dropout, rng)?;
                let m = tape.constant(mask);
                tape.mul(h, m)
            }
            _ => Ok(h),
        }
    }

    /// Predict the clean semantics `ŝ0` from `s_t: [b×d_s]`.
    ///
    /// `cond` is an encoded condition `[b×cond_dim]`; rows flagged in `mask`
    /// are replaced by the null embedding.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise(
        &mut self,
        tape: &mut Tape<F>,
        p: &Bound,
        s_t: Var,
        t: &[usize],
        cond: Var,
        mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let c = self.config.clone();
        let sv = tape.value(s_t);
        if sv.dims().len() != 2 || sv.cols() != c.d_s || sv.rows() != t.len() {
            return Err(Error::dims("denoise", sv.dims(), &[t.len(), c.d_s]));
        }
        let cd = tape.dims(cond);
        if cd != [t.len(), c.cond_dim] {
            return Err(Error::dims("denoise", cd, &[t.len(), c.cond_dim]));
        }
        let cond = if mask.iter().any(|&m| m) {
            tape.mask_rows(cond, p.var("null"), mask)?
        } else {
            cond
        };
        let time = tape.constant(self.time.embed_batch(t)?);

        let n = c.hidden.len();
        let mut h = s_t;
        let mut skips = Vec::with_capacity(n);
        for i in 0..n {
            h = self.block(
                tape,
                p,
                h,
                &format!("enc.{i}"),
                i,
                self.fusion.0,
                None,
                time,
                cond,
                mode,
            )?;
            skips.push(h);
        }
        for i in 0..n {
            let skip = skips[n - 1 - i];
            h = self.block(
                tape,
                p,
                h,
                &format!("dec.{i}"),
                n + i,
                self.fusion.1,
                Some(skip),
                time,
                cond,
                mode,
            )?;
        }
        self.linear(tape, p, h, "out")
    }

    /// Parameters followed by running statistics, as named tensors.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<F>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for (i, s) in self.bn.iter().enumerate() {
            let w = s.width();
            out.push((
                format!("bn.{i}.mean"),
                Tensor::from_parts(vec![w], s.mean.clone()),
            ));
            out.push((
                format!("bn.{i}.var"),
                Tensor::from_parts(vec![w], s.var.clone()),
            ));
        }
        out
    }

    /// Overwrites parameters and running statistics from named tensors.
    ///
    /// Every expected tensor must be present with the exact shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<F>)]) -> Result<()> {
        let lookup = |name: &str, dims: &[usize]| -> Result<Tensor<F>> {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is missing")))?;
            if t.dims() != dims {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: stored {:?}, model expects {:?}",
                    t.dims(),
                    dims
                )));
            }
            Ok(t.clone())
        };
        let mut params = self.params.clone();
        for (name, t) in self.params.iter() {
            params.insert(name.to_string(), lookup(name, t.dims())?);
        }
        let mut bn = self.bn.clone();
        for (i, s) in bn.iter_mut().enumerate() {
            let w = [s.width()];
            s.mean = lookup(&format!("bn.{i}.mean"), &w)?.into_data();
            s.var = lookup(&format!("bn.{i}.var"), &w)?.into_data();
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("load_named"));
        }
        self.params = params;
        self.bn = bn;
        Ok(())
    }

    /// Seen-class logits from `ŝ0`.
    pub fn classify_head(&self, tape: &mut Tape<F>, p: &Bound, s0_hat: Var) -> Result<Var> {
        let d = tape.dims(s0_hat);
        if d.len() != 2 || d[1] != self.config.d_s {
            return Err(Error::dims("classify_head", d, &[self.config.d_s]));
        }
        self.linear(tape, p, s0_hat, "cls")
    }

    /// Inference-mode condition encoding of `x: [b×d_x]`.
    pub fn encode(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let c = self.encode_condition(&mut tape, &p, xv)?;
        Ok(tape.value(c).clone())
    }

    /// Inference-mode `ŝ0` from an already encoded condition; `None` selects
    /// the null embedding for every row.
    pub fn predict_encoded(
        &mut self,
        s_t: &Tensor<F>,
        t: &[usize],
        cond: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let sv = tape.constant(s_t.clone());
        let c = match cond {
            Some(c) => tape.constant(c.clone()),
            None => self.null_condition(&mut tape, &p, t.len()),
        };
        let out = self.denoise(&mut tape, &p, sv, t, c, &[], &mut Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Inference-mode prediction on plain tensors. `cond = None` uses the null
    /// embedding for every row.
    pub fn predict(
        &mut self,
        s_t: &Tensor<F>,
        t: &[usize],
        x: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let sv = tape.constant(s_t.clone());
        let cond = match x {
            Some(x) => {
                let xv = tape.constant(x.clone());
                self.encode_condition(&mut tape, &p, xv)?
            }
            None => self.null_condition(&mut tape, &p, t.len()),
        };
        let out = self.denoise(&mut tape, &p, sv, t, cond, &[], &mut Mode::Eval)?;
        Ok(tape.value(out).clone())
    }
}

/// Mean cross-entropy of seen-class logits against labels.
pub fn loss_classification<F: Scalar>(tape: &mut Tape<F>, logits: Var, y: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, y)
}
