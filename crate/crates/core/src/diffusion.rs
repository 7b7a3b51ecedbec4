//! Forward noising, the ground-truth posterior, and the training losses.
//!
//! Batched functions take one timestep per row. Squared norms are summed over
//! features and averaged over rows.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// How the per-timestep loss weights are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// The variance-derived coefficients in front of each loss.
    Analytic,
    /// `w_t = w'_t = 1`.
    #[default]
    Unit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    #[serde(default)]
    pub w_mode: WeightMode,
    pub p_conditional: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.01,
            w_mode: WeightMode::Unit,
            p_conditional: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!(
                "lambdas must be non-negative, got {lambdas:?}"
            )));
        }
        if lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::Config("at least one lambda must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.p_conditional) {
            return Err(Error::Config(format!(
                "p_conditional must lie in [0, 1), got {}",
                self.p_conditional
            )));
        }
        Ok(())
    }
}

/// One training minibatch with its drawn timesteps and noise.
#[derive(Clone, Debug)]
pub struct DiffusionBatch<F: Scalar> {
    pub s0: Tensor<F>,
    pub x: Tensor<F>,
    pub y: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Tensor<F>,
    pub s_t: Tensor<F>,
}

impl<F: Scalar> DiffusionBatch<F> {
    pub fn new(
        s0: Tensor<F>,
        x: Tensor<F>,
        y: Vec<usize>,
        t: Vec<usize>,
        eps: Tensor<F>,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        if x.rows() != s0.rows() || y.len() != s0.rows() {
            return Err(Error::dims("diffusion_batch", s0.dims(), x.dims()));
        }
        for &ti in &t {
            schedule.check_step(ti, 1)?;
        }
        let s_t = forward_noise(&s0, &t, &eps, schedule)?;
        Ok(DiffusionBatch {
            s0,
            x,
            y,
            t,
            eps,
            s_t,
        })
    }
}

/// `s ∈ [0,1] ↦ 2s − 1 ∈ [−1,1]`; values outside `[0,1]` are clamped first.
pub fn precondition<F: Scalar>(s: &Tensor<F>) -> Tensor<F> {
    let two = F::of(2.0);
    s.map(|v| two * v.max(F::zero()).min(F::one()) - F::one())
}

/// Number of entries that [`precondition`] would clamp beyond a `1e-6` tolerance.
pub fn out_of_range_count<F: Scalar>(s: &Tensor<F>) -> usize {
    let tol = F::of(1e-6);
    s.data()
        .iter()
        .filter(|&&v| v < -tol || v > F::one() + tol)
        .count()
}

/// Inverse of [`precondition`]: `s' ↦ (s' + 1)/2`.
pub fn unmap<F: Scalar>(s: &Tensor<F>) -> Tensor<F> {
    let half = F::of(0.5);
    s.map(|v| (v + F::one()) * half)
}

fn check_rows<F: Scalar>(op: &'static str, a: &Tensor<F>, t: &[usize]) -> Result<()> {
    if a.rows() != t.len() {
        return Err(Error::dims(op, a.dims(), &[t.len()]));
    }
    Ok(())
}

fn check_same<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dims(op, a.dims(), b.dims()));
    }
    Ok(())
}

/// Closed-form `s_t = √ᾱ_t·s0 + √(1−ᾱ_t)·ε`, row-wise; `t = 0` is the clean anchor.
pub fn forward_noise<F: Scalar>(
    s0: &Tensor<F>,
    t: &[usize],
    eps: &Tensor<F>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    check_same("forward_noise", s0, eps)?;
    check_rows("forward_noise", s0, t)?;
    let mut out = s0.clone();
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_step(ti, 0)?;
        let ab = schedule.alpha_bar(ti);
        let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        for (o, &e) in out.row_mut(i).iter_mut().zip(eps.row(i)) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

/// Ground-truth posterior `q(s_{t−1} | s_t, s0)`: mean rows and per-row variance.
pub fn posterior_mean_var<F: Scalar>(
    s_t: &Tensor<F>,
    s0: &Tensor<F>,
    t: &[usize],
    schedule: &NoiseSchedule,
) -> Result<(Tensor<F>, Vec<f64>)> {
    check_same("posterior_mean_var", s_t, s0)?;
    check_rows("posterior_mean_var", s_t, t)?;
    let mut mean = s_t.clone();
    let mut var = Vec::with_capacity(t.len());
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_step(ti, 1)?;
        let (cs, c0) = posterior_coefficients(schedule, ti);
        let (cs, c0) = (F::of(cs), F::of(c0));
        for (m, &x0) in mean.row_mut(i).iter_mut().zip(s0.row(i)) {
            *m = cs * *m + c0 * x0;
        }
        var.push(schedule.posterior_var(ti));
    }
    Ok((mean, var))
}

/// Coefficients `(c_t, c_0)` of `μ_q = c_t·s_t + c_0·s0`.
pub fn posterior_coefficients(schedule: &NoiseSchedule, t: usize) -> (f64, f64) {
    let (a, ab, ab_prev) = (
        schedule.alpha(t),
        schedule.alpha_bar(t),
        schedule.alpha_bar(t - 1),
    );
    let denom = 1.0 - ab;
    (
        a.sqrt() * (1.0 - ab_prev) / denom,
        ab_prev.sqrt() * (1.0 - a) / denom,
    )
}

/// Noise implied by a clean estimate: `ε̂ = (s_t − √ᾱ_t·ŝ0)/√(1−ᾱ_t)`.
pub fn eps_from_x0<F: Scalar>(
    s_t: &Tensor<F>,
    s0_hat: &Tensor<F>,
    t: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    check_same("eps_from_x0", s_t, s0_hat)?;
    check_rows("eps_from_x0", s_t, t)?;
    let mut out = s_t.clone();
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_step(ti, 1)?;
        let ab = schedule.alpha_bar(ti);
        let (a, inv) = (F::of(ab.sqrt()), F::of(1.0 / (1.0 - ab).sqrt()));
        for (o, &x0) in out.row_mut(i).iter_mut().zip(s0_hat.row(i)) {
            *o = (*o - a * x0) * inv;
        }
    }
    Ok(out)
}

/// Posterior mean written in terms of the noise:
/// `μ = s_t/√α_t − (1−α_t)/(√(1−ᾱ_t)·√α_t)·ε`.
pub fn posterior_mean_from_eps<F: Scalar>(
    s_t: &Tensor<F>,
    eps: &Tensor<F>,
    t: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    check_same("posterior_mean_from_eps", s_t, eps)?;
    check_rows("posterior_mean_from_eps", s_t, t)?;
    let mut out = s_t.clone();
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_step(ti, 1)?;
        let (a, ab) = (schedule.alpha(ti), schedule.alpha_bar(ti));
        let cs = F::of(1.0 / a.sqrt());
        let ce = F::of((1.0 - a) / ((1.0 - ab).sqrt() * a.sqrt()));
        for (o, &e) in out.row_mut(i).iter_mut().zip(eps.row(i)) {
            *o = cs * *o - ce * e;
        }
    }
    Ok(out)
}

/// Variance used inside the analytic weights; the first step has zero
/// posterior variance, so it falls back to `beta_1`.
fn weight_variance(schedule: &NoiseSchedule, t: usize) -> f64 {
    let v = schedule.posterior_var(t);
    if v > 0.0 {
        v
    } else {
        schedule.beta(t)
    }
}

/// `w_t` of the reconstruction loss.
pub fn reconstruction_weight(schedule: &NoiseSchedule, t: usize, mode: WeightMode) -> f64 {
    match mode {
        WeightMode::Unit => 1.0,
        WeightMode::Analytic => {
            let (a, ab, ab_prev) = (
                schedule.alpha(t),
                schedule.alpha_bar(t),
                schedule.alpha_bar(t - 1),
            );
            ab_prev * (1.0 - a).powi(2) / (2.0 * weight_variance(schedule, t) * (1.0 - ab).powi(2))
        }
    }
}

/// `w'_t` of the noise loss.
pub fn noise_weight(schedule: &NoiseSchedule, t: usize, mode: WeightMode) -> f64 {
    match mode {
        WeightMode::Unit => 1.0,
        WeightMode::Analytic => {
            let (a, ab) = (schedule.alpha(t), schedule.alpha_bar(t));
            (1.0 - a).powi(2) / (2.0 * weight_variance(schedule, t) * (1.0 - ab).powi(2) * a)
        }
    }
}

fn weighted_row_mean<F: Scalar>(diff: &Tensor<F>, weights: impl Iterator<Item = f64>) -> f64 {
    let b = diff.rows() as f64;
    weights
        .enumerate()
        .map(|(i, w)| w * diff.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        / b
}

/// `mean_rows( w_t · ‖s0 − ŝ0‖² )`.
pub fn loss_reconstruction<F: Scalar>(
    s0: &Tensor<F>,
    s0_hat: &Tensor<F>,
    t: &[usize],
    mode: WeightMode,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    check_same("loss_reconstruction", s0, s0_hat)?;
    check_rows("loss_reconstruction", s0, t)?;
    for &ti in t {
        schedule.check_step(ti, 1)?;
    }
    let diff = s0.sub(s0_hat)?;
    Ok(weighted_row_mean(
        &diff,
        t.iter()
            .map(|&ti| reconstruction_weight(schedule, ti, mode)),
    ))
}

/// `mean_rows( w'_t · ‖ε − ε̂(s_t, ŝ0)‖² )`.
pub fn loss_noise<F: Scalar>(
    eps: &Tensor<F>,
    s_t: &Tensor<F>,
    s0_hat: &Tensor<F>,
    t: &[usize],
    mode: WeightMode,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    check_same("loss_noise", eps, s_t)?;
    let eps_hat = eps_from_x0(s_t, s0_hat, t, schedule)?;
    let diff = eps.sub(&eps_hat)?;
    Ok(weighted_row_mean(
        &diff,
        t.iter().map(|&ti| noise_weight(schedule, ti, mode)),
    ))
}

/// `λ₁·rec + λ₂·noise + λ₃·cls`.
pub fn total_loss(rec: f64, noise: f64, cls: f64, weights: &LossWeights) -> Result<f64> {
    if !(rec.is_finite() && noise.is_finite() && cls.is_finite()) {
        return Err(Error::NonFinite("total_loss"));
    }
    Ok(weights.lambda1 * rec + weights.lambda2 * noise + weights.lambda3 * cls)
}

/// Reconstruction loss recorded on a tape; `s0` is a constant target.
pub fn reconstruction_loss_var<F: Scalar>(
    tape: &mut Tape<F>,
    s0: Var,
    s0_hat: Var,
    t: &[usize],
    mode: WeightMode,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let b = t.len() as f64;
    let diff = tape.sub(s0_hat, s0)?;
    let sq = tape.mul(diff, diff)?;
    let w = t
        .iter()
        .map(|&ti| F::of(reconstruction_weight(schedule, ti, mode) / b))
        .collect();
    let weighted = tape.scale_rows(sq, w)?;
    Ok(tape.sum(weighted))
}

/// Noise loss recorded on a tape; `eps` and `s_t` are constants.
pub fn noise_loss_var<F: Scalar>(
    tape: &mut Tape<F>,
    eps: Var,
    s_t: Var,
    s0_hat: Var,
    t: &[usize],
    mode: WeightMode,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let b = t.len() as f64;
    let sqrt_ab = t
        .iter()
        .map(|&ti| F::of(schedule.alpha_bar(ti).sqrt()))
        .collect();
    let inv_noise = t
        .iter()
        .map(|&ti| F::of(1.0 / (1.0 - schedule.alpha_bar(ti)).sqrt()))
        .collect();
    let scaled = tape.scale_rows(s0_hat, sqrt_ab)?;
    let resid = tape.sub(s_t, scaled)?;
    let eps_hat = tape.scale_rows(resid, inv_noise)?;
    let diff = tape.sub(eps, eps_hat)?;
    let sq = tape.mul(diff, diff)?;
    let w = t
        .iter()
        .map(|&ti| F::of(noise_weight(schedule, ti, mode) / b))
        .collect();
    let weighted = tape.scale_rows(sq, w)?;
    Ok(tape.sum(weighted))
}
