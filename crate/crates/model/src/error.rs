use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] loosekey_core::Error),

    #[error("shape mismatch in {context}: expected {expected:?}, found {actual:?}")]
    Shape {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("incompatible checkpoint: {field} expected {expected}, found {actual}")]
    Incompatible {
        field: &'static str,
        expected: String,
        actual: String,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss {loss} at step {step} (diffusion step {t})")]
    NonFiniteLoss { step: u64, t: usize, loss: f32 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
