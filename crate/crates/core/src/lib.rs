//! Reversed conditional diffusion for generalized zero-shot learning.
//!
//! A denoiser learns `p(s | x)`, the density of class-semantic attribute
//! vectors `s` given visual features `x`. Unseen images are classified by
//! sampling a semantic estimate with classifier-free guidance and picking the
//! nearest class prototype under cosine distance.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod float;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use config::{DataSource, ModelSpec, RunConfig};
pub use data::{Checkpoint, GzslDataset, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{EvalMode, GzslMetrics};
pub use float::Scalar;
pub use model::{Denoiser, DenoiserConfig, Mode, ParamStore};
pub use optim::{AdamConfig, AdamState};
pub use rng::{RngSnapshot, RngState};
pub use sampling::{GuidanceConfig, NoiseMode};
pub use schedule::{NoiseSchedule, ScheduleConfig, TimeEmbeddingSpec};
pub use tensor::{Operand, Pointwise, Tensor};
pub use training::{LossReport, TrainConfig, Trainer};
