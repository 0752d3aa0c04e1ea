//! Error types shared across the library.

use crate::imaging::ImageIoError;
use crate::model_io::ModelIoError;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not symmetric (max asymmetry {max_abs_diff:e})")]
    NotSymmetric { max_abs_diff: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("cluster index {index} out of range for model with {clusters} clusters")]
    ClusterOutOfRange { index: usize, clusters: usize },

    #[error(transparent)]
    ImageIo(#[from] ImageIoError),

    #[error(transparent)]
    ModelIo(#[from] ModelIoError),
}

impl CoreError {
    pub fn invalid_parameter(name: &'static str, reason: impl Into<String>) -> Self {
        CoreError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
