use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::imageio::FormatError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("weight file: {0}")]
    WeightFile(String),
    #[error("{0}")]
    Data(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
