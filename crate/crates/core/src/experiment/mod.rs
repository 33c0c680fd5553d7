//! End-to-end experiments: data preparation, condensation, recommendation,
//! evaluation, baselines, ablations, sweeps and their report files.

mod config;
mod pipeline;
mod runner;

pub use config::{Baseline, EvalMode, ExperimentConfig, Init, Preset, SyntheticSpec};
pub use pipeline::*;
pub use runner::*;
