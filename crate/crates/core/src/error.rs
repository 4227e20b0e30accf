use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("no closed-form proximal map: {0}")]
    UnsupportedProx(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("trajectory diverged at t = {t}")]
    Divergence { t: f64 },

    #[error("time {tau} is not reachable within the search horizon (reachable up to {reachable})")]
    RangeExceeded { tau: f64, reachable: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension { expected, found })
    }
}
