use std::path::PathBuf;

use thiserror::Error;

/// Failures of a CLI command, each mapped to a fixed exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stale upstream artifact: {0}")]
    Stale(String),

    #[error(transparent)]
    Pipeline(#[from] g2sf::Error),

    #[error("selftest failed: {}", .0.join(", "))]
    SelfTest(Vec<String>),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn stale(msg: impl Into<String>) -> Self {
        CliError::Stale(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 0 success, 1 I/O or runtime failure, 2 configuration or usage,
    /// 3 stale upstream artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Pipeline(g2sf::Error::InvalidConfig(_)) => 2,
            CliError::Stale(_) => 3,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
