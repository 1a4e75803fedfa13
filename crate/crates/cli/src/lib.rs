//! Command-line harness over `attnpyr-core`: training, evaluation, ablation
//! sweeps, gradient checks, operation counts and dataset synthesis.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
