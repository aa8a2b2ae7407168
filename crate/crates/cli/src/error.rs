use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{} not found; run `icube {command}` first", artifact.display())]
    MissingArtifact { artifact: PathBuf, command: &'static str },
    #[error(transparent)]
    Core(#[from] icube_core::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    /// 2 for bad configuration or inputs, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::MissingArtifact { .. } => 2,
            CliError::Core(e) if e.is_validation() => 2,
            _ => 3,
        }
    }
}
