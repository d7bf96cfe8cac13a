//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by any toolkit operation.
#[derive(Debug, Error)]
pub enum StadvError {
    /// Incompatible tensor shapes, naming the primitive and both shapes.
    #[error("shape mismatch in {primitive}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        primitive: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A precondition on arguments was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Text input that could not be parsed, with its 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Training loss became non-finite.
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    /// An attack iteration produced a non-finite loss.
    #[error("non-finite attack loss at iteration {iteration}")]
    AttackDiverged { iteration: usize },

    /// The empirical embedding gap exceeded the theoretical bound.
    #[error("bound violated at trial {trial} (seed {seed}): gap {gap} > bound {bound}")]
    BoundViolation {
        trial: usize,
        seed: u64,
        gap: f64,
        bound: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StadvError>;

impl StadvError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        StadvError::InvalidArgument(msg.into())
    }
}
