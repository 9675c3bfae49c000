use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error(
        "Lanczos did not converge within {max_iter} iterations (last residual {residual:.3e})"
    )]
    LanczosNoConvergence { max_iter: usize, residual: f64 },

    #[error("Lanczos failed at grid point (axis1={axis1}, axis2={axis2}): {source}")]
    GridPointFailure {
        axis1: f64,
        axis2: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("operation not supported for the {variant} variant: {op}")]
    UnsupportedVariant { variant: String, op: String },

    #[error("non-finite loss at step {step}; aborting")]
    NonFiniteLoss { step: usize },

    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
