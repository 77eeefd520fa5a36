use std::path::PathBuf;

use thiserror::Error;
use windcast_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("point ({lat}, {lon}) lies outside the grid")]
    OutOfDomain { lat: f64, lon: f64 },
    #[error("schema error in {file}: {reason}")]
    Schema { file: String, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("undefined metric: {0}")]
    Metric(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Tensor(TensorError::NonFinite { .. }) | Error::Numeric(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
