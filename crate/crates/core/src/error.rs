use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum DlsaError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("training failed: {0}")]
    Training(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DlsaError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        DlsaError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        DlsaError::Contract(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        DlsaError::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// True for failures caused by numerics or optimization rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, DlsaError::Numeric(_) | DlsaError::Training(_))
    }
}

pub type Result<T, E = DlsaError> = std::result::Result<T, E>;
