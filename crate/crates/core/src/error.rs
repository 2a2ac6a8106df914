//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used by every fallible operation in the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by the retrieval engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} at {location}: {reason}")]
    Format {
        what: &'static str,
        location: String,
        reason: String,
    },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: [u8; 4] },

    #[error("unsupported {what} version {version} in {path}")]
    UnsupportedVersion {
        what: &'static str,
        version: u32,
        path: String,
    },

    #[error("duplicate passage id {0:?}")]
    DuplicatePassageId(String),

    #[error("unknown passage id {0:?}")]
    UnknownPassageId(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("corpus too small: need {need} candidates, have {have}")]
    CorpusTooSmall { need: usize, have: usize },

    #[error("no retrieval result for question {0:?}")]
    MissingResult(String),

    #[error("passage id {id:?} present in {present} but missing from {missing}")]
    CollectionMismatch {
        id: String,
        present: &'static str,
        missing: &'static str,
    },

    #[error("evaluation reports cover different question sets: {0}")]
    QuestionSetMismatch(String),

    #[error("gold span ({start}, {end}) out of range for passage of length {len}")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("config error at {location}: {reason}")]
    Config { location: String, reason: String },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches a path to a raw `std::io::Error`.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for a format violation in a named file or stream.
    pub fn format(
        what: &'static str,
        location: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Format {
            what,
            location: location.into(),
            reason: reason.into(),
        }
    }
}
