//! Experiment harness: configuration, data splits and the staged pipeline
//! behind the `icube` binary.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod split;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use pipeline::{MetricsFile, PhaseSummary, Workspace};
