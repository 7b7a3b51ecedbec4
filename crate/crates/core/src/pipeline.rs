//! End-to-end runs: train from a [`RunConfig`], reload the result, evaluate,
//! log trajectories and sweep the classifier weight.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Checkpoint, GzslDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMode, GzslMetrics, ModelSampler};
use crate::model::{Denoiser, DenoiserConfig};
use crate::rng::RngState;
use crate::sampling::{sample_with, Guidance, GuidanceConfig};
use crate::schedule::NoiseSchedule;
use crate::training::{write_loss_history, LossReport, StepEvent, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_HISTORY_FILE: &str = "loss_history.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Configuration stored inside every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run: RunConfig,
    pub model: DenoiserConfig,
}

pub struct TrainOutcome {
    pub trainer: Trainer<f32>,
    pub history: Vec<LossReport>,
    pub meta: CheckpointMeta,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Result<Checkpoint<f32>> {
        Ok(self.trainer.checkpoint(serde_json::to_value(&self.meta)?))
    }
}

/// Trains on the seen-train split of `ds`.
pub fn train(
    cfg: &RunConfig,
    ds: &GzslDataset,
    mut observer: impl FnMut(&StepEvent<'_, f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    let schedule = cfg.schedule.build()?;
    let model = cfg.denoiser_config(ds);
    let meta = CheckpointMeta {
        run: cfg.clone(),
        model: model.clone(),
    };
    let mut trainer = Trainer::new(model, schedule, cfg.train.clone())?;
    let view = ds.seen_train();
    let history = trainer.run(&view, None, &mut observer)?;
    Ok(TrainOutcome {
        trainer,
        history,
        meta,
    })
}

/// Trains and writes `config.json`, `loss_history.csv`, the final
/// `checkpoint.bin` and, with `checkpoint_every = k`, `checkpoint-{step}.bin`
/// every `k` steps.
pub fn train_to_dir(
    cfg: &RunConfig,
    ds: &GzslDataset,
    dir: &Path,
    mut progress: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_json()?).map_err(|e| Error::io(&cfg_path, e))?;
    let meta = serde_json::to_value(CheckpointMeta {
        run: cfg.clone(),
        model: cfg.denoiser_config(ds),
    })?;
    let every = cfg.train.checkpoint_every;
    let outcome = train(cfg, ds, |ev| {
        progress(ev.report);
        if let Some(k) = every {
            if k > 0 && ev.report.step % k == 0 {
                let path = dir.join(format!("checkpoint-{}.bin", ev.report.step));
                ev.trainer.checkpoint(meta.clone()).save(path)?;
            }
        }
        Ok(())
    })?;
    write_loss_history(dir.join(LOSS_HISTORY_FILE), &outcome.history)?;
    outcome.checkpoint()?.save(dir.join(CHECKPOINT_FILE))?;
    Ok(outcome)
}

/// A trained denoiser with the schedule it was trained for.
pub struct LoadedModel {
    pub model: Denoiser<f32>,
    pub schedule: NoiseSchedule,
    pub meta: CheckpointMeta,
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    from_checkpoint(&ckpt)
}

pub fn from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<LoadedModel> {
    let meta: CheckpointMeta = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    let schedule = meta.run.schedule.build()?;
    let mut model = Denoiser::new(meta.model.clone(), schedule.steps(), &mut RngState::new(0))?;
    model.load_named(&ckpt.tensors)?;
    Ok(LoadedModel {
        model,
        schedule,
        meta,
    })
}

/// Errors unless the model's dimensions match the dataset's.
pub fn check_compatible(model: &DenoiserConfig, ds: &GzslDataset) -> Result<()> {
    let want = (ds.d_s(), ds.d_x(), ds.seen_classes.len());
    let have = (model.d_s, model.d_x, model.n_seen_classes);
    if want != have {
        return Err(Error::Config(format!(
            "checkpoint expects (d_s, d_x, seen classes) = {have:?}, dataset has {want:?}"
        )));
    }
    Ok(())
}

pub fn evaluate_model(
    model: &mut Denoiser<f32>,
    schedule: &NoiseSchedule,
    ds: &GzslDataset,
    guidance: GuidanceConfig,
    n_draws: usize,
    mode: EvalMode,
) -> Result<GzslMetrics> {
    check_compatible(&model.config, ds)?;
    let mut sampler = ModelSampler {
        model,
        schedule,
        guidance,
        n_draws,
    };
    evaluate(ds, &mut sampler, mode)
}

/// Per-step mean cosine distance between the chain and the true class
/// attributes of `rows`, ordered from `t = T` down to `t = 1`.
pub fn trajectory(
    model: &mut Denoiser<f32>,
    schedule: &NoiseSchedule,
    ds: &GzslDataset,
    rows: &[usize],
    guidance: &GuidanceConfig,
) -> Result<Vec<(usize, f64)>> {
    let x = ds.features.select_rows(rows);
    let labels: Vec<usize> = rows.iter().map(|&r| ds.labels[r]).collect();
    let reference = ds.attributes.select_rows(&labels);
    let out = sample_with(
        model,
        &x,
        schedule,
        guidance,
        Guidance::Cfg(guidance.g),
        Some(&reference),
    )?;
    Ok(out.trajectory)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda3: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub zsl_unseen: f64,
}

/// Retrains once per `λ3` value with everything else fixed and scores each model.
pub fn lambda3_sweep(
    cfg: &RunConfig,
    ds: &GzslDataset,
    grid: &[f64],
    n_draws: usize,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &l3 in grid {
        let mut c = cfg.clone();
        c.train.loss.lambda3 = l3;
        c.validate()?;
        let mut out = train(&c, ds, |_| Ok(()))?;
        let schedule = out.trainer.schedule.clone();
        let m = evaluate_model(
            &mut out.trainer.model,
            &schedule,
            ds,
            c.guidance,
            n_draws,
            EvalMode::Gzsl,
        )?;
        let row = SweepRow {
            lambda3: l3,
            s: m.s,
            u: m.u,
            h: m.h,
            zsl_unseen: m.zsl_unseen,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda3,S,U,H,zsl_unseen\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.lambda3, r.s, r.u, r.h, r.zsl_unseen
        ));
    }
    out
}

/// Parses a comma-separated list of non-negative reals.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("not a number in grid: {s:?}")))?;
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("grid values must be >= 0, got {v}")));
            }
            Ok(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_run_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::synthetic_preset("tiny", 1).unwrap();
        let ds = cfg.load_dataset().unwrap();
        let mut lines = 0;
        let out = train_to_dir(&cfg, &ds, dir.path(), |_| lines += 1).unwrap();
        assert_eq!(lines, out.history.len());
        let csv = fs::read_to_string(dir.path().join(LOSS_HISTORY_FILE)).unwrap();
        assert_eq!(csv.lines().count(), out.history.len() + 1);
        let back = RunConfig::load(dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(back, cfg);

        let mut loaded = load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(loaded.meta.run, cfg);
        assert_eq!(loaded.model.params, out.trainer.model.params);
        let mut trained = out.trainer.model.clone();
        let sched = loaded.schedule.clone();
        let a = evaluate_model(
            &mut loaded.model,
            &sched,
            &ds,
            cfg.guidance,
            1,
            EvalMode::Gzsl,
        );
        let b = evaluate_model(&mut trained, &sched, &ds, cfg.guidance, 1, EvalMode::Gzsl);
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn trajectory_has_one_row_per_step() {
        let cfg = RunConfig::synthetic_preset("tiny", 0).unwrap();
        let ds = cfg.load_dataset().unwrap();
        let mut out = train(&cfg, &ds, |_| Ok(())).unwrap();
        let sched = out.trainer.schedule.clone();
        let traj = trajectory(
            &mut out.trainer.model,
            &sched,
            &ds,
            &ds.test_unseen,
            &cfg.guidance,
        )
        .unwrap();
        let ts: Vec<usize> = traj.iter().map(|r| r.0).collect();
        assert_eq!(ts, (1..=cfg.schedule.steps).rev().collect::<Vec<_>>());
        assert!(traj.iter().all(|r| r.1.is_finite()));
    }

    #[test]
    fn incompatible_dataset_rejected() {
        let cfg = RunConfig::synthetic_preset("tiny", 0).unwrap();
        let ds = cfg.load_dataset().unwrap();
        let mut model = cfg.denoiser_config(&ds);
        model.d_s += 1;
        let msg = check_compatible(&model, &ds).unwrap_err().to_string();
        assert!(msg.contains("d_s"));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0, 0.01,1").unwrap(), vec![0.0, 0.01, 1.0]);
        assert!(parse_grid("0,-1").is_err());
        assert!(parse_grid("0,x").is_err());
    }

    #[test]
    fn sweep_emits_one_row_per_value() {
        let cfg = RunConfig::synthetic_preset("tiny", 0).unwrap();
        let ds = cfg.load_dataset().unwrap();
        let rows = lambda3_sweep(&cfg, &ds, &[0.0, 1.0], 1, |_| {}).unwrap();
        assert_eq!(rows.len(), 2);
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("lambda3,S,U,H,zsl_unseen\n0,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
