//! Experiment driver: configuration, protocol runs, artifacts and reports.

pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;

pub use config::{DataSource, ExperimentConfig, Protocol};
pub use error::{CliError, CliResult};
