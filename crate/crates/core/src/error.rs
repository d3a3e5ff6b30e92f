use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A density entry is nonpositive, non-finite, or the vector is not a
    /// probability vector.
    #[error("domain error: {0}")]
    Domain(String),

    /// The graph cannot support the requested linear solve (disconnected).
    #[error("structural error: {0}")]
    Structural(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },

    /// A forward Euler step would leave the positive orthant at `vertex`.
    #[error("step rejected: density at vertex {vertex} would become nonpositive")]
    StepRejected { vertex: usize },

    #[error("step size collapsed after {halvings} consecutive halvings at t = {t}")]
    Stiffness { halvings: usize, t: f64 },

    #[error("mass drifted by {mass_error:e} at t = {t}")]
    Integrity { mass_error: f64, t: f64 },

    #[error("rate estimation failed: {0}")]
    Estimation(String),

    #[error("rate fit failed: {0}")]
    Fit(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
