//! Classifier-free guided ancestral sampling of semantic vectors.

use serde::{Deserialize, Serialize};

use crate::diffusion::{eps_from_x0, posterior_coefficients, unmap};
use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::model::Denoiser;
use crate::rng::RngState;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Scale of the noise added by each reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// `σ_t = √posterior_var[t]`
    #[default]
    PosteriorSqrt,
    /// `σ_t = √β_t`
    BetaSqrt,
    /// `σ_t = β_t`
    BetaLiteral,
}

impl NoiseMode {
    pub fn sigma(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            NoiseMode::PosteriorSqrt => schedule.posterior_var(t).sqrt(),
            NoiseMode::BetaSqrt => schedule.beta(t).sqrt(),
            NoiseMode::BetaLiteral => schedule.beta(t),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub g: f64,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    /// Number of reverse steps; `None` runs the full chain. A shorter chain
    /// starts from pure noise at `t = steps`.
    #[serde(default)]
    pub steps: Option<usize>,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            g: 1.0,
            noise_mode: NoiseMode::PosteriorSqrt,
            steps: None,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.g >= 0.0 && self.g.is_finite()) {
            return Err(Error::Config(format!(
                "guidance g must be >= 0, got {}",
                self.g
            )));
        }
        if let Some(s) = self.steps {
            if s == 0 || s > schedule.steps() {
                return Err(Error::Config(format!(
                    "sampling steps must lie in [1, {}], got {s}",
                    schedule.steps()
                )));
            }
        }
        Ok(())
    }

    pub fn start_step(&self, schedule: &NoiseSchedule) -> usize {
        self.steps.unwrap_or(schedule.steps())
    }
}

/// `(1+g)·cond − g·uncond`.
pub fn cfg_combine<F: Scalar>(cond: &Tensor<F>, uncond: &Tensor<F>, g: f64) -> Result<Tensor<F>> {
    combine_with(cond, uncond, 1.0 + g, -g)
}

/// `a·cond + b·uncond`.
pub fn combine_with<F: Scalar>(
    cond: &Tensor<F>,
    uncond: &Tensor<F>,
    a: f64,
    b: f64,
) -> Result<Tensor<F>> {
    let (a, b) = (F::of(a), F::of(b));
    cond.zip_map(uncond, |c, u| a * c + b * u)
}

/// One ancestral step `s_{t−1} = μ_q(s_t, clip(ŝ0)) + σ_t·z`; `z` is ignored at `t = 1`.
pub fn reverse_step<F: Scalar>(
    s_t: &Tensor<F>,
    s0_hat: &Tensor<F>,
    t: usize,
    schedule: &NoiseSchedule,
    mode: NoiseMode,
    z: &Tensor<F>,
) -> Result<Tensor<F>> {
    schedule.check_step(t, 1)?;
    if s_t.dims() != s0_hat.dims() || s_t.dims() != z.dims() {
        return Err(Error::dims("reverse_step", s_t.dims(), s0_hat.dims()));
    }
    let (ct, c0) = posterior_coefficients(schedule, t);
    let (ct, c0) = (F::of(ct), F::of(c0));
    let sigma = if t == 1 {
        F::zero()
    } else {
        F::of(mode.sigma(schedule, t))
    };
    let one = F::one();
    let mut out = s_t.clone();
    for ((o, &x0), &zi) in out.data_mut().iter_mut().zip(s0_hat.data()).zip(z.data()) {
        let x0 = x0.max(-one).min(one);
        let mut v = ct * *o + c0 * x0;
        if t > 1 {
            v += sigma * zi;
        }
        *o = v;
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("reverse_step"));
    }
    Ok(out)
}

/// Max deviation between guiding in `ŝ0` space then converting to `ε̂`, and
/// converting both predictions first, for combination weights `(a, b)`.
pub fn combination_deviation<F: Scalar>(
    s_t: &Tensor<F>,
    cond: &Tensor<F>,
    uncond: &Tensor<F>,
    (a, b): (f64, f64),
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    schedule.check_step(t, 2)?;
    let ts = vec![t; s_t.rows()];
    let guided = combine_with(cond, uncond, a, b)?;
    let lhs = eps_from_x0(s_t, &guided, &ts, schedule)?;
    let ec = eps_from_x0(s_t, cond, &ts, schedule)?;
    let eu = eps_from_x0(s_t, uncond, &ts, schedule)?;
    let rhs = combine_with(&ec, &eu, a, b)?;
    Ok(lhs.sub(&rhs)?.max_abs().as_f64())
}

/// [`combination_deviation`] with the guidance weights `(1+g, −g)`.
pub fn cfg_equivalence_check<F: Scalar>(
    s_t: &Tensor<F>,
    cond: &Tensor<F>,
    uncond: &Tensor<F>,
    g: f64,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    combination_deviation(s_t, cond, uncond, (1.0 + g, -g), t, schedule)
}

/// How the two denoiser passes are combined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Guidance {
    /// `(1+g)·cond − g·uncond`
    Cfg(f64),
    /// Conditional pass only.
    ConditionalOnly,
}

/// Output of a sampling run.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput<F> {
    /// Unmapped and clamped to `[0, 1]`, `[b × d_s]`.
    pub semantics: Tensor<F>,
    /// `(t, mean cosine distance)` per reverse step when a reference was given.
    pub trajectory: Vec<(usize, f64)>,
}

/// Draws `b` semantic vectors conditioned on `x: [b×d_x]`.
///
/// Row `i` uses its own random stream derived from `(seed, i)`, so a row's
/// result does not depend on the rest of the batch.
pub fn sample<F: Scalar>(
    model: &mut Denoiser<F>,
    x: &Tensor<F>,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
) -> Result<Tensor<F>> {
    Ok(sample_with(
        model,
        x,
        schedule,
        guidance,
        Guidance::Cfg(guidance.g),
        None,
    )?
    .semantics)
}

/// Full sampler. With `reference` (true class attributes in `[0,1]`, one row
/// per input), records after every step the mean cosine distance between the
/// chain state and the preconditioned reference.
pub fn sample_with<F: Scalar>(
    model: &mut Denoiser<F>,
    x: &Tensor<F>,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    mode: Guidance,
    reference: Option<&Tensor<F>>,
) -> Result<SampleOutput<F>> {
    guidance.validate(schedule)?;
    if model.max_t() != schedule.steps() {
        return Err(Error::Config(format!(
            "model was built for T = {}, schedule has T = {}",
            model.max_t(),
            schedule.steps()
        )));
    }
    let (b, d_s) = (x.rows(), model.config.d_s);
    if x.dims().len() != 2 || x.cols() != model.config.d_x {
        return Err(Error::dims("sample", x.dims(), &[model.config.d_x]));
    }
    let target = match reference {
        Some(r) if r.dims() != [b, d_s] => return Err(Error::dims("sample", r.dims(), &[b, d_s])),
        Some(r) => Some(r.map(|v| F::of(2.0) * v - F::one())),
        None => None,
    };
    let mut streams: Vec<RngState> = (0..b as u64)
        .map(|i| RngState::derive(guidance.seed, i))
        .collect();
    let draw = |streams: &mut [RngState]| -> Tensor<F> {
        let mut z = Tensor::zeros(&[b, d_s]);
        for (i, rng) in streams.iter_mut().enumerate() {
            for v in z.row_mut(i) {
                *v = F::of(rng.standard_normal());
            }
        }
        z
    };

    let cond = model.encode(x)?;
    let mut s = draw(&mut streams);
    let mut trajectory = Vec::new();
    for t in (1..=guidance.start_step(schedule)).rev() {
        let ts = vec![t; b];
        let c = model.predict_encoded(&s, &ts, Some(&cond))?;
        let s0_hat = match mode {
            Guidance::ConditionalOnly => c,
            Guidance::Cfg(g) => {
                let u = model.predict_encoded(&s, &ts, None)?;
                cfg_combine(&c, &u, g)?
            }
        };
        let z = if t > 1 {
            draw(&mut streams)
        } else {
            Tensor::zeros(&[b, d_s])
        };
        s = reverse_step(&s, &s0_hat, t, schedule, guidance.noise_mode, &z)?;
        if let Some(target) = &target {
            trajectory.push((t, mean_cosine_distance(&s, target)));
        }
    }
    let semantics = unmap(&s).map(|v| v.max(F::zero()).min(F::one()));
    Ok(SampleOutput {
        semantics,
        trajectory,
    })
}

/// Row-averaged `1 − cos(a_i, b_i)`; a zero row counts as distance 1.
pub fn mean_cosine_distance<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> f64 {
    let rows = a.rows().max(1);
    let mut total = 0.0;
    for i in 0..a.rows() {
        let (x, y) = (a.row(i), b.row(i));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p.as_f64() * q.as_f64()).sum();
        let nx: f64 = x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        total += if nx > 0.0 && ny > 0.0 {
            1.0 - dot / (nx * ny)
        } else {
            1.0
        };
    }
    total / rows as f64
}
