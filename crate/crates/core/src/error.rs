use std::path::PathBuf;

use mdm_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown prompt token {0:?}")]
    UnknownToken(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("incompatible file {path}: {reason}")]
    Incompatible { path: PathBuf, reason: String },
    #[error("missing input: {0}")]
    Missing(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable category, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::ShapeMismatch { .. }) => "shape",
            Error::Tensor(TensorError::NonFinite { .. }) | Error::Diverged(_) => "divergence",
            Error::Tensor(_) | Error::InvalidArgument(_) | Error::UnknownToken(_) => "argument",
            Error::Config(_) => "config",
            Error::Corrupt { .. } => "corrupt",
            Error::Incompatible { .. } => "incompatible",
            Error::Missing(_) => "missing",
            Error::Io(_) | Error::Csv(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "argument" | "shape" => 2,
            "config" => 3,
            "io" => 4,
            "corrupt" | "incompatible" => 5,
            "missing" => 6,
            "divergence" => 7,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
