use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed pack or store file; `field` names the offending field.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),

    #[error("concept `{label}` is not ready: {reason}")]
    NotReady { label: String, reason: String },

    #[error("missing concept file for `{label}` at {}", path.display())]
    MissingConcept { label: String, path: PathBuf },

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("label `{0}` is outside the fixed vocabulary of this head")]
    UnsupportedLabel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            context,
            expected,
            got,
        }
    }

    /// True for errors caused by malformed input files.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::Format { .. } | Error::Checksum(_) | Error::MissingConcept { .. } | Error::Json(_)
        )
    }
}
