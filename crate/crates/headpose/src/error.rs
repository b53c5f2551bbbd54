use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or activation had an unexpected shape.
    #[error("shape mismatch at {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    /// A configuration value violated its invariants.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A numeric value was NaN or infinite where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Input data was degenerate (rank-deficient correspondences, empty
    /// batches, all-zero masks, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An iterative solver did not converge within its iteration budget.
    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NotConverged { iterations: usize, last_change: f64 },

    /// The pose solver ran out of iterations; carries the last iterate.
    #[error(
        "pose solver did not converge after {iterations} iterations (last change {last_change:e}); \
        last iterate yaw={yaw:.3} pitch={pitch:.3} roll={roll:.3} tx={tx:.3} ty={ty:.3} s={scale:.5}"
    )]
    PositNotConverged {
        iterations: usize,
        last_change: f64,
        yaw: f64,
        pitch: f64,
        roll: f64,
        tx: f64,
        ty: f64,
        scale: f64,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
