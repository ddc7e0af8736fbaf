use std::path::PathBuf;

/// Errors produced by the motion data model and the operations built on it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate 6D rotation")]
    DegenerateRotation,

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("invalid pose layout: {0}")]
    InvalidLayout(String),

    #[error("invalid motion: {0}")]
    InvalidMotion(String),

    #[error("dimension mismatch at frame {frame}: expected {expected} values, found {actual}")]
    DimensionMismatch {
        frame: usize,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at frame {frame}, field {field}")]
    NonFinite { frame: usize, field: String },

    #[error("length mismatch: expected {expected}, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("invalid keyframes: {0}")]
    InvalidKeyframes(String),

    #[error("observation has no constrained frames")]
    NoConstraints,

    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
