use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("imaginary residue {0:.3e} in real representation (input not Hermitian?)")]
    ImagResidue(f64),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("overlap matrix nearly singular (min eigenvalue {0:.3e})")]
    NearSingularOverlap(f64),

    #[error("SCF did not converge in {0} iterations")]
    NoConvergence(usize),

    #[error("trajectory invariant breached at step {step}: {what}")]
    InvariantBreach { step: usize, what: String },

    #[error("objective is not finite")]
    NonFiniteObjective,

    #[error("no converged runs to select from")]
    NoConvergedRuns,

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
