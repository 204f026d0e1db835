use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes of checkpoint decoding. Each has its own code so callers
/// (and the C ABI) can tell them apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointFault {
    BadMagic,
    UnsupportedVersion,
    Truncated,
    ShapeMismatch,
    Malformed,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },

    #[error("configuration mismatch in fields: {}", .fields.join(", "))]
    ConfigMismatch { fields: Vec<String> },

    #[error("checkpoint error ({fault:?}): {detail}")]
    Checkpoint { fault: CheckpointFault, detail: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::InvalidData(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn checkpoint(fault: CheckpointFault, detail: impl Into<String>) -> Self {
        Error::Checkpoint { fault, detail: detail.into() }
    }

    /// True for errors caused by the user's configuration rather than by a
    /// failure while running. The CLI maps these to exit code 1.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::UnknownKey(_)
                | Error::BadValue { .. }
                | Error::InvalidArgument(_)
                | Error::ConfigMismatch { .. }
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
