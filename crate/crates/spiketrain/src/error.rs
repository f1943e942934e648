use std::path::PathBuf;

use spiketrain_core::Error as CoreError;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Validation = 1,
    Data = 2,
    Numeric = 3,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Numeric(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            Self::Validation(_) => ExitCode::Validation,
            Self::Data(_) | Self::Io { .. } => ExitCode::Data,
            Self::Numeric(_) => ExitCode::Numeric,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Invalid(_) | CoreError::Config(_) | CoreError::Duration(_) | CoreError::NotRecurrent(_) => {
                Self::Validation(e.to_string())
            }
            CoreError::Shape { .. } | CoreError::InputOutOfRange { .. } | CoreError::UnorderedSpikes(_) => {
                Self::Data(e.to_string())
            }
            CoreError::Singular { .. } | CoreError::NonFinite(_) | CoreError::NoConvergence { .. } => {
                Self::Numeric(e.to_string())
            }
        }
    }
}

impl From<crate::idx::IdxError> for CliError {
    fn from(e: crate::idx::IdxError) -> Self {
        match e {
            crate::idx::IdxError::Io { path, source } => Self::Io { path, source },
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<crate::events::EventError> for CliError {
    fn from(e: crate::events::EventError) -> Self {
        match e {
            crate::events::EventError::Io { path, source } => Self::Io { path, source },
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<crate::checkpoint::CheckpointError> for CliError {
    fn from(e: crate::checkpoint::CheckpointError) -> Self {
        match e {
            crate::checkpoint::CheckpointError::Io { path, source } => Self::Io { path, source },
            other => Self::Data(other.to_string()),
        }
    }
}
