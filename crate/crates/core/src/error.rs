use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("series `{0}` is constant (zero variance)")]
    ConstantSeries(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("series `{0}` contains NaN or infinite values")]
    NonFinite(String),

    #[error("signature must contain ≥1 QoS parameter")]
    EmptySignature,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("angle undefined: zero-magnitude vector")]
    UndefinedAngle,

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("unknown detector `{name}` (available: {available})")]
    UnknownDetector { name: String, available: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}
