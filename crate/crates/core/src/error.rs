use std::path::PathBuf;

use invdes_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error("missing prerequisite: stage `{stage}` has not produced {path}")]
    MissingPrerequisite { stage: String, path: PathBuf },
    #[error("config: {0}")]
    Config(String),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidParams(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }

    /// True for failures caused by NaN/Inf or a failed factorization.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CoreError::Numerical(_) | CoreError::Tensor(TensorError::NonFinite(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
