//! Experiment orchestration for minibatch-coupled flow matching: TOML
//! configs, training loops, evaluation and artifact files.

pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod train;

pub use config::ExperimentConfig;
pub use error::CliError;
