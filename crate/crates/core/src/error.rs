use std::path::PathBuf;

use mmf_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("manifest {path}: {problems:?}")]
    Manifest { path: PathBuf, problems: Vec<String> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no precomputed residual for {0}")]
    MissingResidual(PathBuf),
    #[error("bayar weights violate the constraint (center {center}, off-center sum {sum}); project first")]
    BayarConstraint { center: f64, sum: f64 },
    #[error("non-finite loss {loss} at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: String, loss: f64 },
    #[error("metric: {0}")]
    Metric(String),
    #[error("{stage}: {source}")]
    Stage { stage: String, source: Box<Error> },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage { stage: stage.into(), source: Box::new(self) }
    }
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
