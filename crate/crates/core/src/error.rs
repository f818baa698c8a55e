use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum SnsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("cholesky factorization failed at pivot {pivot} (value {value:e})")]
    Factorization { pivot: usize, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SnsError>;

impl SnsError {
    pub(crate) fn dims(context: &'static str, expected: usize, got: usize) -> Self {
        SnsError::DimensionMismatch {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        SnsError::NonFinite {
            context: context.into(),
        }
    }
}
