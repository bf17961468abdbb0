use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: unknown event type {token:?}")]
    UnknownEventType { line: usize, token: String },

    #[error("line {line}: duplicate item id {item_id:?}")]
    DuplicateItem { line: usize, item_id: String },

    #[error("unknown {kind} id {id:?}")]
    UnknownId { kind: &'static str, id: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("gradient verification failed: {0}")]
    Verification(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format error at byte {offset}: {message}")]
    Checkpoint { offset: u64, message: String },

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norms: {norms})")]
    NonFinite {
        epoch: u64,
        batch: u64,
        norms: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            op,
            expected,
            actual,
        }
    }
}
