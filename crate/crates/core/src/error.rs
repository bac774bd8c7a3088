use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the attack lab.
#[derive(Debug, Error)]
pub enum MkorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid label {label} for {classes} classes (labels are 1-based)")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("channel budget exceeded at layer {layer}: need {needed}, have {available}")]
    ChannelBudget {
        layer: usize,
        needed: usize,
        available: usize,
    },

    #[error("pooling stage count mismatch: I + J = {requested}, model has {available}")]
    PoolingCount { requested: usize, available: usize },

    #[error("dataset unavailable: {0}")]
    DatasetUnavailable(String),

    #[error("batch request unsatisfiable: {0}")]
    Unsatisfiable(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("zero denominator for class {0} flagged present")]
    ZeroDenominator(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MkorError>;

impl MkorError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MkorError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        MkorError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
