//! Error type carrying the process exit code.

use std::fmt;

use cliffkit::attribution::AttributionError;
use cliffkit::evaluation::MetricError;
use cliffkit::model::CheckpointError;
use cliffkit::pairs::PairsError;
use cliffkit::training::TrainError;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_COMPAT: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn input(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_INPUT, error: error.into() }
    }

    pub fn numeric(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_NUMERIC, error: error.into() }
    }

    pub fn compat(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_COMPAT, error: error.into() }
    }

    pub fn context(self, message: impl fmt::Display + Send + Sync + 'static) -> Self {
        Failure { code: self.code, error: self.error.context(message) }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type Outcome<T> = Result<T, Failure>;

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::input(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::input(e)
    }
}

impl From<PairsError> for Failure {
    fn from(e: PairsError) -> Self {
        Failure::input(e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => Failure::input(io),
            other => Failure::compat(other),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::EmptySet(_) | TrainError::Io(_) => Failure::input(e),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Model(_) => Failure::compat(e),
            TrainError::Divergence { .. } | TrainError::Autodiff(_) | TrainError::Metric(_) => {
                Failure::numeric(e)
            }
        }
    }
}

impl From<AttributionError> for Failure {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::UnknownMethod(_) => Failure::input(e),
            AttributionError::Model(_) => Failure::compat(e),
            _ => Failure::numeric(e),
        }
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Attribution(a) => a.into(),
            MetricError::Io(io) => Failure::input(io),
            MetricError::NoThresholds => Failure::input(e),
            _ => Failure::numeric(e),
        }
    }
}
