//! Self-checks run by `revcd verify`: 64-bit oracle suites over the kernels,
//! the gradients, the guidance algebra and the prior term.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::diffusion::{
    eps_from_x0, forward_noise, posterior_mean_from_eps, posterior_mean_var, precondition,
    DiffusionBatch, LossWeights, WeightMode,
};
use crate::error::{Error, Result};
use crate::model::{Denoiser, DenoiserConfig, Mode};
use crate::rng::RngState;
use crate::sampling::{
    cfg_combine, cfg_equivalence_check, combination_deviation, sample_with, Guidance,
    GuidanceConfig,
};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::training::record_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Kernels,
    Gradient,
    Cfg,
    PriorKl,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Kernels, Suite::Gradient, Suite::Cfg, Suite::PriorKl];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Kernels => "kernels",
            Suite::Gradient => "gradient",
            Suite::Cfg => "cfg",
            Suite::PriorKl => "prior_kl",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown verification suite {s:?}")))
    }
}

/// One measured quantity and its bound.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    /// `value ≤ bound` when false, `value > bound` when true.
    pub above: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound,
            above: false,
        }
    }

    fn above(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound,
            above: true,
        }
    }

    pub fn passed(&self) -> bool {
        if self.above {
            self.value > self.bound
        } else {
            self.value <= self.bound
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub seconds: f64,
    pub negated: bool,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn line(&self) -> String {
        let worst = self
            .checks
            .iter()
            .find(|c| !c.passed())
            .or(self.checks.first())
            .map(|c| {
                let op = if c.above { ">" } else { "<=" };
                format!("{} = {:.3e} (need {op} {:.0e})", c.name, c.value, c.bound)
            })
            .unwrap_or_default();
        format!(
            "{} {:<9} {:>6.2}s  {worst}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.seconds
        )
    }
}

/// Runs one suite. `negate` injects a known fault so the suite must fail.
pub fn run_suite(suite: Suite, negate: bool, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = match suite {
        Suite::Kernels => kernels(negate, seed)?,
        Suite::Gradient => {
            let (err, _) = gradient_check(&GradientCheck {
                seed,
                negate,
                ..GradientCheck::default()
            })?;
            vec![Check::at_most("max relative error", err, 1e-4)]
        }
        Suite::Cfg => cfg(negate, seed)?,
        Suite::PriorKl => prior_kl(negate, seed)?,
    };
    Ok(SuiteReport {
        suite,
        checks,
        seconds: start.elapsed().as_secs_f64(),
        negated: negate,
    })
}

pub fn run_all(negate: &[Suite], seed: u64) -> Result<Vec<SuiteReport>> {
    Suite::ALL
        .into_iter()
        .map(|s| run_suite(s, negate.contains(&s), seed))
        .collect()
}

fn kernels(negate: bool, seed: u64) -> Result<Vec<Check>> {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let mut rng = RngState::derive(seed, 0x4b45_524e);

    // Step-by-step forward chains against the closed form at t = 50.
    let (chains, t, s0) = (100_000usize, 50usize, [0.9, -0.4, 0.0, 0.6]);
    let d = s0.len();
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for _ in 0..chains {
        for j in 0..d {
            let mut v = s0[j];
            for k in 1..=t {
                let b = schedule.beta(k);
                v = (1.0 - b).sqrt() * v + b.sqrt() * rng.standard_normal();
            }
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    let ab = schedule.alpha_bar(t);
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for j in 0..d {
        let m = sum[j] / chains as f64;
        let v = sq[j] / chains as f64 - m * m;
        mean_err = mean_err.max((m - ab.sqrt() * s0[j]).abs());
        var_err = var_err.max((v / (1.0 - ab) - 1.0).abs());
    }

    // Posterior mean in its two parameterizations.
    let mut post_err = 0.0f64;
    for _ in 0..1000 {
        let ti = rng.int_inclusive(1, schedule.steps());
        let st = rng.gaussian::<f64>(&[1, 8]);
        let x0 = rng.gaussian::<f64>(&[1, 8]);
        let (mu, _) = posterior_mean_var(&st, &x0, &[ti], &schedule)?;
        let eps = eps_from_x0(&st, &x0, &[ti], &schedule)?;
        let mut eps = eps;
        if negate {
            eps = eps.scale(1.0 + 1e-6);
        }
        let mu_eps = posterior_mean_from_eps(&st, &eps, &[ti], &schedule)?;
        post_err = post_err.max(mu.sub(&mu_eps)?.max_abs());
    }

    // Closed-form noising with ε = 0 is the scaled mean.
    let zero = Tensor::zeros(&[1, d]);
    let s0t = Tensor::from_f64(&[1, d], &s0)?;
    let clean = forward_noise(&s0t, &[t], &zero, &schedule)?;
    let closed = s0t.scale(ab.sqrt()).sub(&clean)?.max_abs();

    Ok(vec![
        Check::at_most("chain mean error", mean_err, 1e-2),
        Check::at_most("chain variance relative error", var_err, 2e-2),
        Check::at_most("posterior mean disagreement", post_err, 1e-10),
        Check::at_most("closed-form mean error", closed, 1e-15),
    ])
}

fn cfg(negate: bool, seed: u64) -> Result<Vec<Check>> {
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02)?;
    let mut rng = RngState::derive(seed, 0x4346_4721);

    let mut eq_dev = 0.0f64;
    let mut control = f64::INFINITY;
    for k in 0..200 {
        let g = [0.0, 0.5, 1.0, 2.0, 7.5][k % 5];
        let t = rng.int_inclusive(2, schedule.steps());
        let st = rng.gaussian::<f64>(&[3, 6]);
        let c = rng.gaussian::<f64>(&[3, 6]);
        let u = rng.gaussian::<f64>(&[3, 6]);
        let dev = if negate {
            combination_deviation(&st, &c, &u, (1.0 + g, g), t, &schedule)?
        } else {
            cfg_equivalence_check(&st, &c, &u, g, t, &schedule)?
        };
        eq_dev = eq_dev.max(dev);
        if g > 0.0 {
            let dev = combination_deviation(&st, &c, &u, (1.0 + g, g), t, &schedule)?;
            control = control.min(dev);
        }
    }

    // Hand-computed guided values.
    let c = Tensor::from_f64(&[1, 3], &[0.5, -1.0, 2.0])?;
    let u = Tensor::from_f64(&[1, 3], &[1.5, 0.25, -2.0])?;
    let hand: [(f64, [f64; 3]); 3] = [
        (0.0, [0.5, -1.0, 2.0]),
        (0.5, [0.0, -1.625, 4.0]),
        (2.0, [-1.5, -3.5, 10.0]),
    ];
    let mut hand_err = 0.0f64;
    for (g, want) in hand {
        let got = cfg_combine(&c, &u, if negate { g + 1.0 } else { g })?;
        for (a, b) in got.data().iter().zip(want) {
            hand_err = hand_err.max((a - b).abs());
        }
    }

    // g = 0 sampling against the conditional-only sampler.
    let mut model = tiny_model(seed, 10)?;
    let sched = NoiseSchedule::linear(10, 1e-4, 0.02)?;
    let x = RngState::derive(seed, 7).gaussian::<f64>(&[4, model.config.d_x]);
    let gc = GuidanceConfig {
        g: 0.0,
        seed,
        ..GuidanceConfig::default()
    };
    let guided = sample_with(
        &mut model,
        &x,
        &sched,
        &gc,
        Guidance::Cfg(if negate { 0.5 } else { 0.0 }),
        None,
    )?;
    let plain = sample_with(&mut model, &x, &sched, &gc, Guidance::ConditionalOnly, None)?;
    let bits_differ = guided
        .semantics
        .data()
        .iter()
        .zip(plain.semantics.data())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();

    Ok(vec![
        Check::at_most("guided-noise equivalence deviation", eq_dev, 1e-10),
        Check::above("unbalanced-weights deviation", control, 1e-3),
        Check::at_most("hand arithmetic error", hand_err, 1e-15),
        Check::at_most(
            "g=0 vs conditional-only differing values",
            bits_differ as f64,
            0.0,
        ),
    ])
}

fn prior_kl(negate: bool, seed: u64) -> Result<Vec<Check>> {
    let schedule = if negate {
        NoiseSchedule::linear(100, 1e-4, 0.02)?
    } else {
        NoiseSchedule::linear(1000, 1e-4, 0.02)?
    };
    let d = 16;
    let mut rng = RngState::derive(seed, 0x5052_494f);
    let mut worst = 0.0f64;
    let mut probe = |s0: Tensor<f64>| worst = worst.max(schedule.prior_kl(&s0) / d as f64);
    probe(Tensor::full(&[1, d], 1.0));
    probe(Tensor::full(&[1, d], -1.0));
    probe(Tensor::zeros(&[1, d]));
    for _ in 0..100 {
        let v: Vec<f64> = (0..d).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        probe(Tensor::from_f64(&[1, d], &v)?);
    }
    Ok(vec![Check::at_most("prior KL per dimension", worst, 1e-2)])
}

fn tiny_model(seed: u64, max_t: usize) -> Result<Denoiser<f64>> {
    let cfg = DenoiserConfig {
        d_s: 4,
        d_x: 6,
        hidden: vec![8, 4],
        time_dim: 4,
        cond_dim: 4,
        n_heads: 2,
        n_tokens: 2,
        dropout: 0.1,
        n_seen_classes: 3,
    };
    Denoiser::new(cfg, max_t, &mut RngState::derive(seed, 0x4d4f_444c))
}

/// Finite-difference check of the full training objective.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub model: DenoiserConfig,
    pub steps: usize,
    pub batch: usize,
    pub weights: LossWeights,
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Perturbs the analytic gradient of the first parameter.
    pub negate: bool,
}

impl Default for GradientCheck {
    fn default() -> Self {
        GradientCheck {
            model: DenoiserConfig {
                d_s: 8,
                d_x: 16,
                hidden: vec![32, 16, 8],
                time_dim: 8,
                cond_dim: 8,
                n_heads: 2,
                n_tokens: 4,
                dropout: 0.1,
                n_seen_classes: 3,
            },
            steps: 100,
            batch: 6,
            weights: LossWeights {
                lambda1: 1.0,
                lambda2: 1.0,
                lambda3: 1.0,
                w_mode: WeightMode::Unit,
                p_conditional: 0.0,
            },
            h: 1e-5,
            floor: 1e-3,
            seed: 0,
            negate: false,
        }
    }
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Returns the worst relative error and the name of the parameter it occurs in.
///
/// Every row but the first keeps its condition and the first uses the null
/// embedding, so every parameter group is exercised. Dropout masks are
/// redrawn from the same stream state on every evaluation.
pub fn gradient_check(spec: &GradientCheck) -> Result<(f64, String)> {
    let schedule = NoiseSchedule::linear(spec.steps, 1e-4, 0.02)?;
    let mut rng = RngState::derive(spec.seed, 0x4752_4144);
    let mut model: Denoiser<f64> = Denoiser::new(spec.model.clone(), spec.steps, &mut rng)?;
    let b = spec.batch;
    let cfg = &spec.model;
    let s: Vec<f64> = (0..b * cfg.d_s).map(|_| rng.uniform()).collect();
    let s = precondition(&Tensor::from_f64(&[b, cfg.d_s], &s)?);
    let x = rng.gaussian::<f64>(&[b, cfg.d_x]);
    let y: Vec<usize> = (0..b).map(|i| i % cfg.n_seen_classes).collect();
    let t: Vec<usize> = (0..b).map(|_| rng.int_inclusive(1, spec.steps)).collect();
    let eps = rng.gaussian::<f64>(&[b, cfg.d_s]);
    let batch = DiffusionBatch::new(s, x, y, t, eps, &schedule)?;
    let mask: Vec<bool> = (0..b).map(|i| i == 0).collect();
    let dropout = RngState::derive(spec.seed, 0x4452_4f50);

    let eval = |model: &mut Denoiser<f64>, grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let mut r = dropout.clone();
        let lv = record_loss(
            model,
            &mut tape,
            &p,
            &batch,
            &mask,
            &spec.weights,
            &schedule,
            &mut Mode::Train(&mut r),
        )?;
        let value = tape.value(lv.total).data()[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(lv.total)?;
        let gs = p
            .vars()
            .iter()
            .map(|&v| g.get(v).cloned().expect("parameter gradient"))
            .collect();
        Ok((value, gs))
    };

    let (_, mut analytic) = eval(&mut model, true)?;
    if spec.negate {
        analytic[0].data_mut()[0] += 1.0;
    }
    let names: Vec<String> = model.params.names().to_vec();
    let (mut worst, mut at) = (0.0f64, String::new());
    for (k, name) in names.iter().enumerate() {
        for j in 0..analytic[k].len() {
            let orig = model.params.tensors()[k].data()[j];
            model.params.tensors_mut()[k].data_mut()[j] = orig + spec.h;
            let (up, _) = eval(&mut model, false)?;
            model.params.tensors_mut()[k].data_mut()[j] = orig - spec.h;
            let (down, _) = eval(&mut model, false)?;
            model.params.tensors_mut()[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * spec.h);
            let err = relative_error(analytic[k].data()[j], numeric, spec.floor);
            if err > worst || err.is_nan() {
                worst = err;
                at = format!("{name}[{j}]");
            }
        }
    }
    Ok((worst, at))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn cheap_suites_pass_and_negations_fail() {
        for suite in [Suite::Cfg, Suite::PriorKl] {
            let r = run_suite(suite, false, 0).unwrap();
            assert!(r.passed(), "{r:?}");
            assert!(!run_suite(suite, true, 0).unwrap().passed(), "{suite}");
        }
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1e-9, 0.0, 1e-3), 1e-6);
        assert_eq!(relative_error(2.0, 1.0, 1e-3), 0.5);
    }

    #[test]
    fn small_gradient_check_passes() {
        let spec = GradientCheck {
            model: DenoiserConfig {
                hidden: vec![6, 4],
                d_s: 3,
                d_x: 8,
                ..GradientCheck::default().model
            },
            batch: 4,
            ..GradientCheck::default()
        };
        let (err, at) = gradient_check(&spec).unwrap();
        assert!(err <= 1e-4, "{err} at {at}");
        let (bad, _) = gradient_check(&GradientCheck {
            negate: true,
            ..spec
        })
        .unwrap();
        assert!(bad > 1e-4);
    }
}
