use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HffError>;

#[derive(Debug, Error)]
pub enum HffError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path} at byte offset {offset}: {reason}")]
    Format { path: PathBuf, offset: u64, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HffError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            HffError::Usage(_) | HffError::Config(_) => 2,
            HffError::Format { .. } | HffError::Io { .. } | HffError::Artifact(_) => 3,
            HffError::Dimension(_) | HffError::NonFinite(_) | HffError::Divergence(_) => 4,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        HffError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        HffError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HffError::Io { path: path.into(), source }
    }
}
