//! Experiment runner: config parsing, checkpoints, plots and reports around
//! the `brhier-core` solvers and learners.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod plot;
pub mod runner;
pub mod summary;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::CliError;
