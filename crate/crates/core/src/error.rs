//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, spectral computations, estimators
/// and the Monte Carlo harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Model or query parameters violate a structural constraint.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Malformed request (bad node count, empty sample set, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Vector/matrix dimensions do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Evaluation requested at (or numerically on top of) a pole.
    #[error("pole evaluation: {0}")]
    Pole(String),

    /// Evaluation requested on the boundary of the spectral support.
    #[error("support boundary: {0}")]
    SupportBoundary(String),

    /// The cluster-separation conditions fail, so a contour-based
    /// computation has no valid premise.
    #[error("separation condition violated: {0}")]
    Separation(String),

    /// The predicted variance of the requested statistic vanishes.
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    /// Root finding or quadrature failed to converge, or a numerical
    /// self-check was violated.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
