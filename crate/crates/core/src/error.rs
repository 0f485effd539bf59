use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SplitqError>;

#[derive(Debug, Error)]
pub enum SplitqError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing modality: {0}")]
    MissingModality(String),

    #[error("bad magic: expected \"SPQT\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("tag-length mismatch: {tags} tags for {rows} rows")]
    TagLengthMismatch { tags: usize, rows: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("transform is not invertible: {0}")]
    NotInvertible(String),

    #[error("svd did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SplitqError {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        SplitqError::DimensionMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SplitqError::InvalidConfig(msg.into())
    }

    /// True for errors caused by malformed or inconsistent input data, as
    /// opposed to bad configuration or numerical breakdown.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            SplitqError::DimensionMismatch(_)
                | SplitqError::NonFinite { .. }
                | SplitqError::MissingModality(_)
                | SplitqError::BadMagic(_)
                | SplitqError::UnsupportedVersion(_)
                | SplitqError::Truncated(_)
                | SplitqError::TagLengthMismatch { .. }
                | SplitqError::Format(_)
                | SplitqError::Io(_)
                | SplitqError::Json(_)
        )
    }

    pub fn is_numerical_failure(&self) -> bool {
        matches!(
            self,
            SplitqError::NotInvertible(_)
                | SplitqError::NoConvergence { .. }
                | SplitqError::NonFiniteLoss { .. }
        )
    }
}
