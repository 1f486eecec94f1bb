use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported norm pair ({p}, {q})")]
    UnsupportedNormPair { p: String, q: String },

    #[error("unsupported layer for {op}: {layer}")]
    UnsupportedLayer { op: &'static str, layer: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("network invariant violated: {0}")]
    InvalidNetwork(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("config error at {path}: {detail}")]
    Config { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }
}
