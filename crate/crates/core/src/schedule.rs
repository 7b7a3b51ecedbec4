//! Noise schedules and sinusoidal time embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-step tables indexed by `t ∈ [0, T]`; index 0 is the clean anchor
/// (`beta = 0`, `alpha_bar = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `beta` from `beta_start` to `beta_end`, endpoints inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (1..=steps).map(|t| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
            }
        });
        Self::from_betas(betas.collect())
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument(
                "every beta must lie in (0, 1)".into(),
            ));
        }
        let n = betas.len();
        let mut beta = Vec::with_capacity(n + 1);
        let mut alpha = Vec::with_capacity(n + 1);
        let mut alpha_bar = Vec::with_capacity(n + 1);
        let mut posterior_var = Vec::with_capacity(n + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        posterior_var.push(0.0);
        for b in betas {
            let a = 1.0 - b;
            let prev = *alpha_bar.last().expect("anchor");
            let ab = prev * a;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(ab);
            posterior_var.push((1.0 - a) * (1.0 - prev) / (1.0 - ab));
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    pub fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    /// Closed-form `KL(q(s_T | s0) ‖ N(0, I))`, summed over dimensions.
    ///
    /// Contains no trainable parameters, so it is reported but never optimized.
    pub fn prior_kl<F: Scalar>(&self, s0: &Tensor<F>) -> f64 {
        let ab = self.alpha_bar(self.steps());
        let var = 1.0 - ab;
        s0.data()
            .iter()
            .map(|&v| {
                let mu = ab.sqrt() * v.as_f64();
                0.5 * (var + mu * mu - 1.0 - var.ln())
            })
            .sum()
    }
}

/// Even embedding width `d` with geometric frequencies `f_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbeddingSpec {
    frequencies: Vec<f64>,
    max_t: usize,
}

impl TimeEmbeddingSpec {
    /// `f_i = 10000^(-2i/d)` for `i ∈ [0, d/2)`.
    pub fn new(dim: usize, max_t: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "time embedding width must be even and positive, got {dim}"
            )));
        }
        let frequencies = (0..dim / 2)
            .map(|i| 10000f64.powf(-2.0 * i as f64 / dim as f64))
            .collect();
        Ok(TimeEmbeddingSpec { frequencies, max_t })
    }

    pub fn with_frequencies(frequencies: Vec<f64>, max_t: usize) -> Result<Self> {
        let decreasing = frequencies.windows(2).all(|w| w[0] > w[1]);
        if frequencies.is_empty() || !decreasing || frequencies.iter().any(|&f| f <= 0.0) {
            return Err(Error::InvalidArgument(
                "frequencies must be positive and strictly decreasing".into(),
            ));
        }
        Ok(TimeEmbeddingSpec { frequencies, max_t })
    }

    pub fn dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// `[cos(t·f₀), sin(t·f₀), …]`.
    pub fn embed<F: Scalar>(&self, t: usize) -> Result<Vec<F>> {
        if t > self.max_t {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 0,
                hi: self.max_t,
            });
        }
        let mut out = Vec::with_capacity(self.dim());
        for &f in &self.frequencies {
            let x = t as f64 * f;
            out.push(F::of(x.cos()));
            out.push(F::of(x.sin()));
        }
        Ok(out)
    }

    /// One embedding row per timestep: `[b × d]`.
    pub fn embed_batch<F: Scalar>(&self, ts: &[usize]) -> Result<Tensor<F>> {
        let mut data = Vec::with_capacity(ts.len() * self.dim());
        for &t in ts {
            data.extend(self.embed::<F>(t)?);
        }
        Tensor::new(vec![ts.len(), self.dim()], data)
    }
}
