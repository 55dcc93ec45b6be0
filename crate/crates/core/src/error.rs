use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum CkgError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Linear algebra broke down past the jitter escalation ladder, or a
    /// computed variance was more negative than roundoff can explain.
    #[error("numeric degeneracy: {0}")]
    NumericDegeneracy(String),

    /// An operation divided by a posterior standard deviation that is zero.
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    /// The requested kernel is not smooth enough for gradient-based paths.
    #[error("unsupported smoothness: {0}")]
    UnsupportedSmoothness(String),

    /// Too many Monte Carlo replications had to be discarded.
    #[error("acquisition estimation failed: {0}")]
    AcquisitionEstimation(String),

    #[error("optimizer failure: {0}")]
    OptimizerFailure(String),

    /// No posterior-mean-feasible point could be found at startup.
    #[error("infeasible start: {0}")]
    InfeasibleStart(String),

    /// A test problem has no feasible point at the requested resolution.
    #[error("infeasible problem: {0}")]
    InfeasibleProblem(String),
}

pub type Result<T> = std::result::Result<T, CkgError>;

impl CkgError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CkgError::InvalidArgument(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        CkgError::NumericDegeneracy(msg.into())
    }
}
