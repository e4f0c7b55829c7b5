use std::path::PathBuf;

use hit_core::HitError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A config field failed to parse or validate; `field` is the dotted path.
    #[error("{}: at `{field}`: {message}", file.display())]
    Field {
        file: PathBuf,
        field: String,
        message: String,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{context}: {source}")]
    Hit {
        context: String,
        #[source]
        source: HitError,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } | Self::Field { .. } | Self::Argument(_) => 2,
            Self::Verification(_) => 5,
            Self::Hit { source, .. } => match source {
                HitError::NonFinite { .. } | HitError::Numeric(_) => 3,
                HitError::Checkpoint(_) => 4,
                // The tape rejecting its own graph is a bug, not bad input.
                HitError::Tape(_) => 1,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches a description of what was being done to a core error.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> Context<T> for hit_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|source| CliError::Hit {
            context: what(),
            source,
        })
    }
}
