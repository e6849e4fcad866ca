use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the numerical toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{k} parameters exceeds the dense-matrix cap of {cap}; use the trace/diagonal estimators")]
    Capacity { k: usize, cap: usize },

    #[error("wrong Fisher form: expected {expected}, got {got}")]
    Form { expected: &'static str, got: &'static str },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("stability undefined: final gradient norm {grad_norm:.3e} exceeds {tol:.1e}")]
    StabilityUndefined { grad_norm: f64, tol: f64 },

    #[error("degenerate plane: {0}")]
    DegeneratePlane(String),

    #[error("regressor head has no class-sum Fisher; use the Gaussian-likelihood path")]
    RegressorHead,

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
