use thiserror::Error;

pub type Result<T, E = CbsaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CbsaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate row {row}: norm {norm:e} is below {eps:e}")]
    DegenerateRow { row: usize, norm: f64, eps: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("labeled set is empty")]
    EmptyLabeled,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CbsaError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        CbsaError::Dimension(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        CbsaError::Format {
            offset,
            message: msg.into(),
        }
    }
}
