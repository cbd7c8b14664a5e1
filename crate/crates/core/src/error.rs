use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
///
/// The CLI maps each variant to a distinct exit code, so variants are kept
/// coarse and keyed by the kind of misuse rather than by call site.
#[derive(Debug, Error)]
pub enum EeError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: expected {expected} input, got {actual}")]
    Domain {
        expected: crate::Domain,
        actual: crate::Domain,
    },

    #[error("range error: token id {id} out of range for vocabulary of {vocab_size}")]
    Range { id: u32, vocab_size: usize },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("key/model pairing error: {0}")]
    Pairing(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("remote judge error after {retries} retries: {msg}")]
    Remote { retries: u32, msg: String },

    #[error("judge protocol error: {0}")]
    Protocol(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EeError> = std::result::Result<T, E>;

impl EeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EeError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        EeError::Format {
            offset,
            msg: msg.into(),
        }
    }
}
