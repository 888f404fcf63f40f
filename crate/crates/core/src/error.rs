use std::path::PathBuf;

use thiserror::Error;

use crate::kernel::EventTrace;
use crate::model::Violation;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scenario failed validation with {} violation(s)", .0.len())]
    Validation(Vec<Violation>),

    #[error("interval {interval} did not quiesce before tick cap {cap} (reached tick {tick})")]
    NonConvergence {
        interval: u32,
        cap: u64,
        tick: u64,
        partial: Box<EventTrace>,
    },

    #[error("degraded system: {0}")]
    DegradedSystem(String),

    #[error("insufficient training data: {0}")]
    InsufficientTraining(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
