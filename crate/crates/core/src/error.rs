use std::path::PathBuf;

use thiserror::Error;

use crate::bounds::BoundError;
use crate::data::IndicatorError;
use crate::geometry::GeometryError;
use crate::kernels::KernelError;
use crate::predictor::PredictorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Indicator(#[from] IndicatorError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code: 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Kernel(_) => 2,
            Error::Numerical(_) => 4,
            Error::Predictor(e) => match e {
                PredictorError::WindowMismatch { .. } | PredictorError::InvalidWindow(..) => 2,
                PredictorError::Flagged(_) | PredictorError::Geometry(_) => 3,
            },
            Error::Bound(e) => match e {
                BoundError::Unresolved { .. } => 4,
                _ => 2,
            },
            Error::Geometry(_)
            | Error::Indicator(_)
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Csv { .. }
            | Error::Json { .. } => 3,
        }
    }
}
