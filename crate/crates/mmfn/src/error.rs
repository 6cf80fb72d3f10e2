//! Error taxonomy. Variants map one-to-one onto CLI exit codes.

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A model invariant failed (exit code 2). Carries a human-readable
    /// summary; the full per-check report comes from `validate_model`.
    #[error("model validation failed: {0}")]
    Validation(String),

    /// Malformed or structurally inconsistent input (exit code 3):
    /// dimension mismatches, non-finite or negative rate entries,
    /// unparseable files.
    #[error("parse error: {0}")]
    Parse(String),

    /// An operation's precondition does not hold (exit code 4), e.g. bounds
    /// requested for an unstable model, or a direction outside the corn
    /// region of the boundary.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// An iterative solver failed to converge within its cap (exit code 5).
    #[error("numerical non-convergence: {0}")]
    NonConvergence(String),
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Parse(_) => 3,
            Error::Precondition(_) => 4,
            Error::NonConvergence(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
