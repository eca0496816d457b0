//! Crate-wide error type.

/// Errors produced by construction, solving, labeling, and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An iterative solver exhausted its budget before reaching tolerance.
    #[error("solver failed to converge: residual {residual:.3e} after {iters} iterations")]
    Solver { residual: f64, iters: usize },

    /// An advantage table violates the soft-normalization condition.
    #[error("consistency violation: {0}")]
    Consistency(String),

    /// An input breaks a documented contract (e.g. unnormalized log-policy).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An instance exceeds a configured size limit.
    #[error("size limit exceeded: {0}")]
    Size(String),

    /// Optimization produced a non-finite quantity.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
