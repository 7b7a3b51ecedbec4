//! Acceptance criteria A1-A9, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the lines are printed in
//! order and uncaptured; exits nonzero when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use revcd::autodiff::Tape;
use revcd::config::RunConfig;
use revcd::data::Checkpoint;
use revcd::diffusion::{
    eps_from_x0, posterior_mean_from_eps, posterior_mean_var, precondition, DiffusionBatch,
    LossWeights, WeightMode,
};
use revcd::eval::{harmonic_mean, EvalMode, GzslMetrics};
use revcd::model::{Denoiser, DenoiserConfig, Mode};
use revcd::pipeline::{evaluate_model, train, trajectory};
use revcd::sampling::{cfg_combine, cfg_equivalence_check, sample_with, Guidance};
use revcd::schedule::NoiseSchedule;
use revcd::training::{record_loss, Trainer};
use revcd::{GuidanceConfig, GzslDataset, RngState, Tensor, TrainConfig};

const SEEDS: [u64; 3] = [0, 1, 2];
const LAMBDA3_GRID: [f64; 4] = [0.0, 0.01, 0.1, 1.0];

struct Outcome {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn report(o: &Outcome) {
    println!(
        "{} {} {}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.title,
        o.detail
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `ᾱ_t` by direct product over a linear β ramp; index 0 is 1.
fn alpha_bars(t_max: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut out = vec![1.0];
    for t in 1..=t_max {
        let beta = lo + (hi - lo) * (t - 1) as f64 / (t_max - 1) as f64;
        out.push(out[t - 1] * (1.0 - beta));
    }
    out
}

fn a1() -> Outcome {
    let start = Instant::now();
    let (t_max, t) = (1000, 50);
    let ab = alpha_bars(t_max, 1e-4, 0.02);
    let betas: Vec<f64> = (1..=t_max).map(|k| 1.0 - ab[k] / ab[k - 1]).collect();

    let mut rng = RngState::new(11);
    let s0 = [0.8, -0.3, 0.0, 1.0];
    let n = 100_000usize;
    let (mut sum, mut sq) = ([0.0f64; 4], [0.0f64; 4]);
    for _ in 0..n {
        for (j, &x0) in s0.iter().enumerate() {
            let mut v = x0;
            for b in &betas[..t] {
                v = (1.0 - b).sqrt() * v + b.sqrt() * rng.standard_normal();
            }
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    let (mut mean_err, mut var_rel) = (0.0f64, 0.0f64);
    for j in 0..4 {
        let m = sum[j] / n as f64;
        let v = sq[j] / n as f64 - m * m;
        mean_err = mean_err.max((m - ab[t].sqrt() * s0[j]).abs());
        var_rel = var_rel.max((v / (1.0 - ab[t]) - 1.0).abs());
    }

    let schedule = NoiseSchedule::linear(t_max, 1e-4, 0.02).unwrap();
    let mut post_err = 0.0f64;
    for _ in 0..1000 {
        let ti = rng.int_inclusive(1, t_max);
        let st: Tensor<f64> = rng.gaussian(&[1, 6]);
        let x0: Tensor<f64> = rng.gaussian(&[1, 6]);
        let (mu_x0, _) = posterior_mean_var(&st, &x0, &[ti], &schedule).unwrap();
        let eps = eps_from_x0(&st, &x0, &[ti], &schedule).unwrap();
        let mu_eps = posterior_mean_from_eps(&st, &eps, &[ti], &schedule).unwrap();
        post_err = post_err.max(mu_x0.sub(&mu_eps).unwrap().max_abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: "A1",
        title: "kernel identities",
        pass: mean_err <= 1e-2 && var_rel <= 0.02 && post_err <= 1e-10 && secs <= 30.0,
        detail: format!(
            "chain mean err {mean_err:.2e} (<=1e-2), variance rel err {var_rel:.2e} (<=2e-2), \
             posterior mean forms differ by {post_err:.2e} (<=1e-10), {secs:.1}s (<=30s)"
        ),
    }
}

fn a2() -> Outcome {
    let start = Instant::now();
    let cfg = DenoiserConfig {
        d_s: 8,
        d_x: 16,
        hidden: vec![32, 16, 8],
        time_dim: 8,
        cond_dim: 8,
        n_heads: 2,
        n_tokens: 4,
        dropout: 0.1,
        n_seen_classes: 3,
    };
    let weights = LossWeights {
        lambda1: 1.0,
        lambda2: 1.0,
        lambda3: 1.0,
        w_mode: WeightMode::Unit,
        p_conditional: 0.0,
    };
    let (h, floor) = (1e-5, 1e-3);
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let mut rng = RngState::new(5);
    let mut model = Denoiser::<f64>::new(cfg.clone(), 100, &mut rng).unwrap();
    let b = 6;
    let s: Vec<f64> = (0..b * cfg.d_s).map(|_| rng.uniform()).collect();
    let batch = DiffusionBatch::new(
        precondition(&Tensor::from_f64(&[b, cfg.d_s], &s).unwrap()),
        rng.gaussian(&[b, cfg.d_x]),
        (0..b).map(|i| i % 3).collect(),
        (0..b).map(|_| rng.int_inclusive(1, 100)).collect(),
        rng.gaussian(&[b, cfg.d_s]),
        &schedule,
    )
    .unwrap();
    // first row uses the null embedding so every parameter is reached
    let mask: Vec<bool> = (0..b).map(|i| i == 0).collect();
    let dropout = RngState::new(77);

    let loss = |m: &mut Denoiser<f64>, grad: bool| {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape);
        let mut r = dropout.clone();
        let lv = record_loss(
            m,
            &mut tape,
            &p,
            &batch,
            &mask,
            &weights,
            &schedule,
            &mut Mode::Train(&mut r),
        )
        .unwrap();
        let v = tape.value(lv.total).data()[0];
        let g = if grad {
            let gr = tape.backward(lv.total).unwrap();
            p.vars()
                .iter()
                .map(|&x| gr.get(x).unwrap().clone())
                .collect()
        } else {
            Vec::new()
        };
        (v, g)
    };
    let (_, analytic) = loss(&mut model, true);
    let (mut worst, mut at, mut count) = (0.0f64, String::new(), 0usize);
    let names = model.params.names().to_vec();
    for (k, name) in names.iter().enumerate() {
        for j in 0..analytic[k].len() {
            let orig = model.params.tensors()[k].data()[j];
            model.params.tensors_mut()[k].data_mut()[j] = orig + h;
            let (up, _) = loss(&mut model, false);
            model.params.tensors_mut()[k].data_mut()[j] = orig - h;
            let (down, _) = loss(&mut model, false);
            model.params.tensors_mut()[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err.is_nan() || err > worst {
                worst = err;
                at = format!("{name}[{j}]");
            }
            count += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: "A2",
        title: "gradient correctness",
        pass: worst <= 1e-4 && secs <= 60.0,
        detail: format!(
            "max rel err {worst:.2e} at {at} over {count} parameters (<=1e-4, denominator floor {floor:e}), {secs:.1}s (<=60s)"
        ),
    }
}

fn a3() -> Outcome {
    let start = Instant::now();
    let cfg = DenoiserConfig {
        d_s: 8,
        d_x: 16,
        hidden: vec![16, 8],
        time_dim: 8,
        cond_dim: 8,
        n_heads: 2,
        n_tokens: 4,
        dropout: 0.1,
        n_seen_classes: 5,
    };
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
    let mut rng = RngState::new(3);
    let mut model = Denoiser::<f32>::new(cfg, 50, &mut rng).unwrap();
    let x: Tensor<f32> = rng.gaussian(&[12, 16]);
    let g0 = GuidanceConfig {
        g: 0.0,
        seed: 9,
        ..GuidanceConfig::default()
    };
    let a = sample_with(&mut model, &x, &schedule, &g0, Guidance::Cfg(0.0), None).unwrap();
    let b = sample_with(
        &mut model,
        &x,
        &schedule,
        &g0,
        Guidance::ConditionalOnly,
        None,
    )
    .unwrap();
    let identical = a
        .semantics
        .data()
        .iter()
        .zip(b.semantics.data())
        .all(|(p, q)| p.to_bits() == q.to_bits());

    let mut dev = 0.0f64;
    for k in 0..100 {
        let g = [0.0, 0.5, 1.0, 2.0, 4.0][k % 5];
        let t = rng.int_inclusive(2, 50);
        let st: Tensor<f64> = rng.gaussian(&[4, 8]);
        let c: Tensor<f64> = rng.gaussian(&[4, 8]);
        let u: Tensor<f64> = rng.gaussian(&[4, 8]);
        dev = dev.max(cfg_equivalence_check(&st, &c, &u, g, t, &schedule).unwrap());
    }

    let c = Tensor::<f64>::from_f64(&[1, 2], &[3.0, -1.0]).unwrap();
    let u = Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
    // (1+g)c - g u by hand
    let cases = [(0.0, [3.0, -1.0]), (0.5, [4.0, -2.5]), (2.0, [7.0, -7.0])];
    let hand_ok = cases.iter().all(|(g, want)| {
        let got = cfg_combine(&c, &u, *g).unwrap();
        got.data()
            .iter()
            .zip(want)
            .all(|(p, q)| (p - q).abs() <= 1e-15)
    });
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: "A3",
        title: "guidance algebra",
        pass: identical && dev <= 1e-10 && hand_ok && secs <= 5.0,
        detail: format!(
            "g=0 vs conditional-only bit-identical: {identical}; equivalence deviation {dev:.2e} (<=1e-10); \
             hand arithmetic g in {{0, 0.5, 2}}: {hand_ok}; {secs:.2}s (<=5s)"
        ),
    }
}

/// One synthetic benchmark run: dataset seed = run seed.
struct Run {
    cfg: RunConfig,
    ds: GzslDataset,
    model: Denoiser<f32>,
    train_secs: f64,
    metrics: GzslMetrics,
}

fn synthetic_run(seed: u64, lambda3: Option<f64>) -> Run {
    let mut cfg = RunConfig::synthetic_preset("default", seed).unwrap();
    if let Some(l3) = lambda3 {
        cfg.train.loss.lambda3 = l3;
    }
    let ds = cfg.load_dataset().unwrap();
    let start = Instant::now();
    let out = train(&cfg, &ds, |_| Ok(())).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let mut model = out.trainer.model;
    let schedule = out.trainer.schedule;
    let metrics =
        evaluate_model(&mut model, &schedule, &ds, cfg.guidance, 1, EvalMode::Gzsl).unwrap();
    Run {
        cfg,
        ds,
        model,
        train_secs,
        metrics,
    }
}

fn a4(runs: &[Run]) -> Outcome {
    let zsl = median(runs.iter().map(|r| r.metrics.zsl_unseen).collect());
    let s = median(runs.iter().map(|r| r.metrics.s).collect());
    let h = median(runs.iter().map(|r| r.metrics.h).collect());
    let slowest = runs.iter().map(|r| r.train_secs).fold(0.0, f64::max);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: zsl {:.3} S {:.3} U {:.3} H {:.3}",
                r.cfg.seed, r.metrics.zsl_unseen, r.metrics.s, r.metrics.u, r.metrics.h
            )
        })
        .collect();
    Outcome {
        id: "A4",
        title: "synthetic end-to-end",
        pass: zsl >= 0.8 && s >= 0.9 && h >= 0.6 && slowest <= 300.0,
        detail: format!(
            "median zsl unseen {zsl:.3} (>=0.8), seen {s:.3} (>=0.9), H {h:.3} (>=0.6), \
             slowest training {slowest:.0}s (<=300s) [{}]",
            per_seed.join("; ")
        ),
    }
}

fn a5(run: &mut Run) -> Outcome {
    let schedule = run.cfg.schedule.build().unwrap();
    let traj = trajectory(
        &mut run.model,
        &schedule,
        &run.ds,
        &run.ds.test_unseen,
        &run.cfg.guidance,
    )
    .unwrap();
    let first = traj.first().unwrap().1;
    let last = traj.last().unwrap().1;
    let k = (traj.len() / 10).max(1);
    let head = traj[..k].iter().map(|r| r.1).sum::<f64>() / k as f64;
    let tail = traj[traj.len() - k..].iter().map(|r| r.1).sum::<f64>() / k as f64;
    let all_finite = traj.iter().all(|r| r.1.is_finite());
    let seen = trajectory(
        &mut run.model,
        &schedule,
        &run.ds,
        &run.ds.test_seen,
        &run.cfg.guidance,
    )
    .unwrap();
    let seen_drop = seen.first().unwrap().1 - seen.last().unwrap().1;
    Outcome {
        id: "A5",
        title: "denoising trajectory",
        pass: all_finite && traj.len() == schedule.steps() && first - last >= 0.3 && tail < head,
        detail: format!(
            "seed {} model, {} steps, unseen test rows: distance {first:.3} at t=T -> {last:.3} at t=0, \
             drop {:.3} (>=0.3); first decile {head:.3}, last decile {tail:.3} [seen test rows, not scored: drop {seen_drop:.3}]",
            run.cfg.seed,
            traj.len(),
            first - last
        ),
    }
}

fn a6() -> Outcome {
    let cases = [(87.5, 32.3, 47.2), (66.9, 43.4, 52.6), (94.5, 42.4, 58.54)];
    let got: Vec<f64> = cases.iter().map(|&(s, u, _)| harmonic_mean(s, u)).collect();
    let pass = cases.iter().zip(&got).all(|(c, g)| (g - c.2).abs() <= 0.05);
    Outcome {
        id: "A6",
        title: "metric arithmetic",
        pass,
        detail: format!(
            "H(87.5, 32.3) = {:.3} (47.2), H(66.9, 43.4) = {:.3} (52.6), H(94.5, 42.4) = {:.3} \
             (58.54; the published table rounds this to 58.3), tolerance 0.05",
            got[0], got[1], got[2]
        ),
    }
}

fn a7(base: &[Run]) -> Outcome {
    let mut seen = Vec::new();
    let mut lines = Vec::new();
    for &l3 in &LAMBDA3_GRID {
        let s: Vec<f64> = SEEDS
            .iter()
            .enumerate()
            .map(|(i, &seed)| {
                if l3 == base[i].cfg.train.loss.lambda3 {
                    base[i].metrics.s
                } else {
                    synthetic_run(seed, Some(l3)).metrics.s
                }
            })
            .collect();
        let m = median(s.clone());
        lines.push(format!("lambda3={l3}: S {s:.3?} median {m:.3}"));
        seen.push(m);
    }
    let (at0, at1) = (seen[0], seen[LAMBDA3_GRID.len() - 1]);
    Outcome {
        id: "A7",
        title: "classifier weight sweep",
        pass: at1 >= at0,
        detail: format!(
            "median seen accuracy {at1:.3} at lambda3=1 vs {at0:.3} at 0 [{}]",
            lines.join("; ")
        ),
    }
}

fn a8() -> Outcome {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let ab = alpha_bars(1000, 1e-4, 0.02)[1000];
    let var = 1.0 - ab;
    let mut rng = RngState::new(8);
    let d = 32;
    let mut worst = 0.0f64;
    let mut oracle_gap = 0.0f64;
    let mut probe = |v: Vec<f64>| {
        let s0 = Tensor::<f64>::from_f64(&[1, d], &v).unwrap();
        let kl = schedule.prior_kl(&s0);
        let oracle: f64 = v
            .iter()
            .map(|x| 0.5 * (var + ab * x * x - 1.0 - var.ln()))
            .sum();
        oracle_gap = oracle_gap.max((kl - oracle).abs());
        worst = worst.max(kl / d as f64);
    };
    probe(vec![1.0; d]);
    probe(vec![-1.0; d]);
    for _ in 0..1000 {
        probe((0..d).map(|_| 2.0 * rng.uniform() - 1.0).collect());
    }
    Outcome {
        id: "A8",
        title: "prior matching",
        pass: worst <= 1e-2 && oracle_gap <= 1e-12,
        detail: format!(
            "max KL per dimension {worst:.2e} (<=1e-2) at T=1000; matches scalar Gaussian KL to {oracle_gap:.1e}"
        ),
    }
}

fn a9() -> Outcome {
    let mut cfg = RunConfig::synthetic_preset("tiny", 4).unwrap();
    cfg.train = TrainConfig {
        epochs: 10,
        deterministic: true,
        ..cfg.train
    };
    let ds = cfg.load_dataset().unwrap();
    let view = ds.seen_train();
    let model = cfg.denoiser_config(&ds);
    let schedule = cfg.schedule.build().unwrap();

    let mut straight =
        Trainer::<f32>::new(model.clone(), schedule.clone(), cfg.train.clone()).unwrap();
    straight.run(&view, Some(20), |_| Ok(())).unwrap();

    let mut first =
        Trainer::<f32>::new(model.clone(), schedule.clone(), cfg.train.clone()).unwrap();
    first.run(&view, Some(10), |_| Ok(())).unwrap();
    let bytes = first
        .checkpoint(serde_json::Value::Null)
        .to_bytes()
        .unwrap();
    drop(first);
    let ckpt = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(&ckpt, model, schedule, cfg.train.clone()).unwrap();
    resumed.run(&view, Some(20), |_| Ok(())).unwrap();

    let bits = |t: &Trainer<f32>| -> Vec<u32> {
        t.checkpoint(serde_json::Value::Null)
            .tensors
            .iter()
            .flat_map(|(_, v)| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let (a, b) = (bits(&straight), bits(&resumed));
    let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    let same_len = a.len() == b.len();
    Outcome {
        id: "A9",
        title: "persistence and determinism",
        pass: same_len && differing == 0 && straight.step() == 20 && resumed.step() == 20,
        detail: format!(
            "10 + checkpoint + 10 steps vs 20 straight: {differing} of {} values differ \
             (parameters, running statistics, optimizer moments)",
            a.len()
        ),
    }
}

fn main() -> ExitCode {
    let mut outcomes = Vec::new();
    let mut record = |o: Outcome| {
        report(&o);
        outcomes.push(o.pass);
    };
    record(a1());
    record(a2());
    record(a3());
    let mut runs: Vec<Run> = SEEDS.iter().map(|&s| synthetic_run(s, None)).collect();
    record(a4(&runs));
    record(a5(&mut runs[0]));
    record(a6());
    record(a7(&runs));
    record(a8());
    record(a9());
    let failed = outcomes.iter().filter(|p| !**p).count();
    println!(
        "{} of {} criteria passed",
        outcomes.len() - failed,
        outcomes.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
