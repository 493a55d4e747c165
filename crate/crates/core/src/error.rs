use std::path::PathBuf;

use thiserror::Error;

use crate::optimizer::SolveResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// One or more validation offenses (scenario, config, ranges).
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// A contract or realization references an unknown participant.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An exact backend refused an instance that exceeds its enumeration guard.
    #[error("instance too large: {0}")]
    Capacity(String),

    /// A search budget was exhausted; carries the best solution found so far.
    #[error("resource guard hit: {message}")]
    Resource {
        message: String,
        incumbent: Option<Box<SolveResult>>,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("ingestion failed: {0}")]
    Ingestion(String),

    #[error("aggregation failed: {0}")]
    Aggregation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
