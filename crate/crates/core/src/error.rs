use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("class {class} is absent from the training labels")]
    MissingClass { class: usize },

    #[error("fold {fold}: training part lacks class {class}")]
    FoldMissingClass { fold: usize, class: usize },

    #[error("non-finite objective or gradient at instance {instance}")]
    NonFinite { instance: usize },

    #[error("no assessment ratings in the series")]
    NoAssessment,

    #[error("{0}")]
    Data(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used by the CLI on stderr.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } | Error::Csv(_) | Error::Json(_) => "format",
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => "argument",
            Error::MissingClass { .. } | Error::FoldMissingClass { .. } | Error::NoAssessment => {
                "data"
            }
            Error::Data(_) => "data",
            Error::NonFinite { .. } => "numeric",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
