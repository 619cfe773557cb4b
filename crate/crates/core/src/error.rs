use thiserror::Error;

/// Errors raised by the estimation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A model or configuration failed validation (dimensions, finiteness, SPD).
    #[error("invalid model: {0}")]
    Validation(String),

    /// A matrix that must be symmetric positive definite failed its Cholesky factorization.
    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: String },

    /// A numerical routine failed in a way that valid inputs should not allow.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Every particle likelihood vanished; carries the largest log-likelihood seen.
    #[error("particle weights degenerated at step {step} (max log-likelihood {max_log_likelihood})")]
    Degenerate { step: usize, max_log_likelihood: f64 },

    /// A fixed-point iteration failed to reach its tolerance.
    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    /// Information matrices violate the ordering `J_z >= J_xi > 0`.
    #[error("information ordering violated: {which} has eigenvalue {eigenvalue:e}")]
    Ordering { which: &'static str, eigenvalue: f64 },

    /// Too many replicates failed to converge in a repeated-sampling estimate.
    #[error("{excluded} of {total} replicates failed to converge at step {step}")]
    TooManyExclusions { step: usize, excluded: usize, total: usize },

    #[error("config parse error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
