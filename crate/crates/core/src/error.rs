use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter sets are not congruent: {0}")]
    Congruence(String),

    #[error("non-finite value produced in {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: row {row}, column `{column}`: {message}")]
    Schema {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
