use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the command-line driver.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] concept_embed::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{path}: {message}")]
    Report { path: PathBuf, message: String },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn report(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Report {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn csv(path: impl Into<PathBuf>, e: csv::Error) -> Self {
        Self::report(path, e.to_string())
    }

    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use concept_embed::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Core(E::Usage(_)) => 1,
            CliError::Core(E::Numeric(_)) => 3,
            _ => 2,
        }
    }
}
