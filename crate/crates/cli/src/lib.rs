//! Config-driven experiment harness: dataset generation, training,
//! evaluation and the distance, SNR and repeated-measurement sweeps.

pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
