use std::path::PathBuf;

/// Errors produced by the matching engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: input is not valid UTF-8")]
    Encoding { context: String },

    #[error("{context}: {message}")]
    Format { context: String, message: String },

    #[error("duplicate header {0:?}")]
    DuplicateHeader(String),

    #[error("header cell {0} is empty")]
    EmptyHeader(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ground truth is empty")]
    EmptyGroundTruth,

    #[error("embedding provider {endpoint} failed: {message}")]
    Provider { endpoint: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training requires at least 4 classes, got {0}")]
    TooFewClasses(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for failures of an external endpoint (as opposed to bad input).
    pub fn is_provider_failure(&self) -> bool {
        matches!(self, Error::Provider { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
