//! JSON run configuration shared by every CLI subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, GzslDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::DenoiserConfig;
use crate::sampling::GuidanceConfig;
use crate::schedule::ScheduleConfig;
use crate::training::TrainConfig;

/// Where the dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// An RZD v1 directory.
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

/// Denoiser hyperparameters that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub n_heads: usize,
    pub n_tokens: usize,
    pub dropout: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: vec![512, 256, 128],
            time_dim: 128,
            cond_dim: 128,
            n_heads: 4,
            n_tokens: 16,
            dropout: 0.1,
        }
    }
}

impl ModelSpec {
    pub fn denoiser(&self, d_s: usize, d_x: usize, n_seen: usize) -> DenoiserConfig {
        DenoiserConfig {
            d_s,
            d_x,
            hidden: self.hidden.clone(),
            time_dim: self.time_dim,
            cond_dim: self.cond_dim,
            n_heads: self.n_heads,
            n_tokens: self.n_tokens,
            dropout: self.dropout,
            n_seen_classes: n_seen,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub schedule: ScheduleConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub output_dir: PathBuf,
    /// Master seed; copied into the training and guidance seeds.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::Path(PathBuf::from("data")),
            schedule: ScheduleConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

/// Names accepted by [`RunConfig::synthetic_preset`].
pub const SYNTHETIC_PRESETS: &[&str] = &["default", "tiny"];

impl RunConfig {
    /// Self-contained runs on generated data.
    ///
    /// `default` is the desk-scale benchmark: 5 seen and 3 unseen classes,
    /// `T = 200`, `g = 1`, and narrower layers than the full-size model so a
    /// run finishes in a few CPU-minutes. `tiny` is a seconds-long smoke run.
    pub fn synthetic_preset(name: &str, seed: u64) -> Result<Self> {
        let base = RunConfig {
            data: DataSource::Synthetic(SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            }),
            schedule: ScheduleConfig {
                steps: 200,
                ..ScheduleConfig::default()
            },
            model: ModelSpec {
                hidden: vec![128, 64, 32],
                time_dim: 32,
                cond_dim: 32,
                n_heads: 4,
                n_tokens: 4,
                dropout: 0.1,
            },
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            output_dir: PathBuf::from(format!("runs/synthetic-{name}-{seed}")),
            seed,
        };
        let cfg = match name {
            "default" => base,
            "tiny" => RunConfig {
                data: DataSource::Synthetic(SyntheticSpec {
                    seed,
                    per_class: 20,
                    ..SyntheticSpec::default()
                }),
                schedule: ScheduleConfig {
                    steps: 20,
                    ..ScheduleConfig::default()
                },
                model: ModelSpec {
                    hidden: vec![16, 8],
                    time_dim: 8,
                    cond_dim: 8,
                    n_heads: 2,
                    n_tokens: 4,
                    dropout: 0.1,
                },
                train: TrainConfig {
                    epochs: 2,
                    batch_size: 16,
                    ..TrainConfig::default()
                },
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown synthetic preset {other:?} (expected one of {SYNTHETIC_PRESETS:?})"
                )))
            }
        };
        Ok(cfg.normalized())
    }

    /// Copies the master seed into the nested seeds.
    pub fn normalized(mut self) -> Self {
        self.train.seed = self.seed;
        self.guidance.seed = self.seed;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg.normalized())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self
            .schedule
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        self.guidance.validate(&schedule)?;
        if let DataSource::Path(p) = &self.data {
            if !p.is_dir() {
                return Err(Error::Config(format!(
                    "dataset directory {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<GzslDataset> {
        match &self.data {
            DataSource::Path(p) => GzslDataset::load(p),
            DataSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }

    pub fn denoiser_config(&self, ds: &GzslDataset) -> DenoiserConfig {
        self.model
            .denoiser(ds.d_s(), ds.d_x(), ds.seen_classes.len())
    }
}
