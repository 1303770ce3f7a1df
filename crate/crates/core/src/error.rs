use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed {format} file: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("image dimensions must be even, got {height}x{width}")]
    OddDimensions { height: usize, width: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("upscaling requested: {src} -> {dst}")]
    Upscaling { src: usize, dst: usize },

    #[error("zero dimension in size pair")]
    ZeroDimension,

    #[error("objective became non-finite at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("non-finite training loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("predictor failed: {0}")]
    Predictor(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch { expected: expected.into(), actual: actual.into() }
    }

    pub fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format { format, reason: reason.into() }
    }
}
