use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EdenError {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing dataset statistics: {0}")]
    MissingStats(String),

    #[error("stage ordering: {0}")]
    StageOrder(String),

    #[error("no samples: {0}")]
    NoSamples(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EdenError {
    /// Short machine-readable category used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            EdenError::Tensor(_) => "tensor",
            EdenError::Io(_) => "io",
            EdenError::Image { .. } => "image",
            EdenError::Dimension(_) | EdenError::ShapeMismatch { .. } => "shape",
            EdenError::InvalidArgument(_) => "argument",
            EdenError::Config { .. } => "config",
            EdenError::Checkpoint(_) => "checkpoint",
            EdenError::Data(_) => "data",
            EdenError::MissingStats(_) => "stats",
            EdenError::StageOrder(_) => "stage-order",
            EdenError::NoSamples(_) => "no-samples",
            EdenError::Csv(_) => "csv",
            EdenError::Json(_) => "json",
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        EdenError::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, EdenError>;
