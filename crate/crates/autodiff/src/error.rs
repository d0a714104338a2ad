use thiserror::Error;

/// Errors raised by tensor construction, graph ops and the optimizer.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("contract violation in {op}: {reason}")]
    Contract { op: &'static str, reason: String },

    #[error("loss is undefined: {0}")]
    UndefinedLoss(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
