use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(String),

    /// The 2x2 moment system has (numerically) zero determinant. This is what
    /// an irrelevant instrument or collinear moments look like.
    #[error("degenerate moment system: |det| = {det:e} is below tolerance {tol:e}")]
    DegenerateSystem { det: f64, tol: f64 },

    #[error("discrete SCM rejected: {0}")]
    InvalidScm(String),

    #[error("conditional covariance is singular at x = {0:?}")]
    SingularCovariance(Vec<f64>),

    #[error("linear system could not be solved: {0}")]
    Singular(String),

    #[error("eigenvalue sequence is not nonincreasing and nonnegative at index {0}")]
    NonMonotone(usize),

    #[error("no critical-radius crossing in (0, 1]")]
    NoCrossing,

    #[error("objective became non-finite at iteration {0}; step sizes are likely too large")]
    NonFinite(usize),

    #[error("kernel weights are degenerate: {0}")]
    DegenerateWeights(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
