//! Shared fixtures for the criterion benches.

use revcd::config::RunConfig;
use revcd::{Denoiser, GzslDataset, RngState, Tensor, Trainer};

/// The synthetic benchmark dataset and its run configuration.
pub fn synthetic() -> (RunConfig, GzslDataset) {
    let cfg = RunConfig::synthetic_preset("default", 0).expect("preset");
    let ds = cfg.load_dataset().expect("synthetic data");
    (cfg, ds)
}

pub fn trainer(cfg: &RunConfig, ds: &GzslDataset) -> Trainer<f32> {
    let schedule = cfg.schedule.build().expect("schedule");
    Trainer::new(cfg.denoiser_config(ds), schedule, cfg.train.clone()).expect("trainer")
}

pub fn model(cfg: &RunConfig, ds: &GzslDataset) -> Denoiser<f32> {
    trainer(cfg, ds).model
}

pub fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    RngState::new(seed).gaussian(&[rows, cols])
}
