use thiserror::Error;

/// Errors raised by tape construction, backward passes, and optimizer steps.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("variable {0} is not on this tape")]
    NotOnTape(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("{0}")]
    Invalid(String),
}
