use std::path::PathBuf;

use loosekey_model::ModelError;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(transparent)]
    Core(#[from] loosekey_core::Error),

    #[error(transparent)]
    Model(#[from] ModelError),

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

    #[error("invalid request: {}", .0.join("; "))]
    Request(Vec<String>),

    #[error("{0}")]
    Invalid(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("server busy: {0}")]
    Busy(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Core(_) => "data",
            Error::Model(ModelError::Incompatible { .. }) => "checkpoint",
            Error::Model(_) => "model",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Request(_) => "request",
            Error::Invalid(_) => "invalid",
            Error::NotFound(_) => "not_found",
            Error::Busy(_) => "busy",
        }
    }

    /// Individual problems, one per field where the source reports several.
    pub fn details(&self) -> Vec<String> {
        match self {
            Error::Config(v) | Error::Request(v) => v.clone(),
            Error::Core(loosekey_core::Error::InvalidKeyframes(msg))
            | Error::Model(ModelError::Core(loosekey_core::Error::InvalidKeyframes(msg))) => {
                msg.split("; ").map(String::from).collect()
            }
            Error::Core(loosekey_core::Error::InvalidConfig(v)) => v.clone(),
            other => vec![other.to_string()],
        }
    }

    /// True when the request itself was at fault rather than the server.
    pub fn is_client_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Request(_)
                | Error::Core(_)
                | Error::Invalid(_)
                | Error::Json { .. }
                | Error::Model(ModelError::Invalid(_) | ModelError::Core(_) | ModelError::Incompatible { .. })
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "error": self.kind(),
            "message": self.to_string(),
            "details": self.details(),
        })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
