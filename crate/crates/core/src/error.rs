use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A caller violated an operation's contract (non-scalar loss, all keys masked, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad model input (span out of range, empty text, unknown id, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid configuration value.
    #[error("config error: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Corrupt or mismatched serialized file.
    #[error("format error: field `{field}`: {reason}")]
    Format { field: String, reason: String },

    /// Training diverged.
    #[error("training error at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { field: field.into(), reason: reason.into() }
    }

    /// True for errors caused by invalid user-supplied values rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Format { .. } | Error::Input(_) | Error::Json(_)
        )
    }
}
