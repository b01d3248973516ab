//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Key or value failed a structural constraint (empty name, oversized
    /// meta blob, NaN in a parameter vector, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Version install would violate chain ordering: the chain's newest
    /// version is at `newest` and the caller tried to install `attempted`.
    #[error("out-of-order install: newest epoch {newest}, attempted {attempted}")]
    EpochOrder { newest: u64, attempted: u64 },

    /// A key's parameter dimension is fixed at creation; a write or delta
    /// with a different dimension is refused.
    #[error("dimension mismatch: key has dim {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    /// Read through a snapshot handle that was already released.
    #[error("snapshot {id} already released")]
    SnapshotReleased { id: u64 },

    /// A pinned version was pruned out from under a live snapshot. The
    /// pruning rule makes this unreachable; seeing it means the store has a
    /// bug, so it is surfaced loudly rather than papered over.
    #[error("internal: snapshot at epoch {epoch} lost its pinned version for {key}")]
    StaleSnapshot { epoch: u64, key: String },

    /// Watermark advance must move to exactly `current + 1`.
    #[error("watermark advance out of order: current {current}, attempted {attempted}")]
    WatermarkSkew { current: u64, attempted: u64 },

    /// Byte-level decode failure (log record, checkpoint, trace line, ...).
    #[error("decode: {0}")]
    Codec(String),

    /// Persistent data that decoded but is semantically impossible
    /// (epoch gaps in the log, checkpoint newer than the log, ...).
    #[error("corrupt data: {0}")]
    Corrupt(String),

    /// The engine halted after a commit-path failure; no further
    /// transactions are accepted.
    #[error("engine halted")]
    Halted,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn codec(msg: impl Into<String>) -> Self {
        Error::Codec(msg.into())
    }
}
