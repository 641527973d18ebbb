//! Experiment runner for the diffusion-denoising OOD detector: JSON configs,
//! seeded pipelines, ablation sweeps and CSV/JSON reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod runner;

pub use config::{Ablation, ExperimentConfig, FieldSource};
pub use error::{RunError, Stage};
pub use runner::{execute, render_report, run_experiment, write_atomically, LockFile, RunOutputs, SamplesFile};
