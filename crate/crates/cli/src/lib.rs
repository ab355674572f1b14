//! Command-line experiment runner: dataset generation, staged training over
//! folds and sweeps, evaluation and reporting.

pub mod config;
pub mod error;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
