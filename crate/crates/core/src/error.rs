//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A model fit could not be completed.
    #[error("fit failed: {0}")]
    FitFailed(String),

    /// Ill-conditioned or singular linear system.
    #[error("singular system: {context} (condition diagnostic {condition:.3e})")]
    Singular { context: String, condition: f64 },

    /// Iterative optimizer hit its iteration cap before converging.
    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    /// A computation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
