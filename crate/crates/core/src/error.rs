use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("wav: {0}")]
    Wav(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// All pairs are tied on at least one side; the rank correlation is undefined.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("stale forward trace: {0}")]
    StaleTrace(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure stems from user input (bad config, bad data) rather
    /// than a defect or environment fault.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Manifest { .. }
                | Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::Wav(_)
                | Error::Checkpoint(_)
                | Error::Empty(_)
        )
    }
}
