use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, channel counts, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint magic mismatch in {path}")]
    CheckpointMagic { path: PathBuf },

    #[error("checkpoint {path} truncated while reading {tensor}")]
    CheckpointTruncated { path: PathBuf, tensor: String },

    #[error("checkpoint block {name}: expected dims {expected:?}, found {found:?}")]
    CheckpointDims {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint holds {found} blocks, the configured network has {expected}")]
    CheckpointBlockCount { expected: usize, found: usize },

    #[error("malformed PGM header: {0}")]
    PgmHeader(String),

    #[error("unsupported PGM maxval {0} (only 255 is accepted)")]
    PgmMaxval(u32),

    #[error("PGM payload too short: expected {expected} bytes, found {found}")]
    PgmShortPayload { expected: usize, found: usize },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("non-finite value encountered in {block}")]
    NonFinite { block: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
