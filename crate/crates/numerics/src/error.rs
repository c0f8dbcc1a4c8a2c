use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("backward requires a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
