use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("model is not stationary (companion spectral radius {0})")]
    NonStationary(f64),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("rejection sampling exhausted after {0} attempts")]
    RejectionBudgetExhausted(usize),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by malformed or inconsistent input data, as
    /// opposed to numerical breakdowns.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch(_)
                | Error::InvalidParameter(_)
                | Error::InsufficientData(_)
                | Error::NonFinite(_)
                | Error::Parse { .. }
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}
