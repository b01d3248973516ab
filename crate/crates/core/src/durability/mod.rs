//! Durability: write-ahead log, checkpoints, recovery.
//!
//! The engine logs logical redo records (committed transactions only), one
//! record per epoch, framed as `[len u32][body][crc32c u32]`. Recovery loads
//! the newest intact checkpoint and replays log records above its epoch
//! through the same deterministic chain fold the live engine uses. A torn or
//! corrupt tail is truncated logically during the scan and physically the
//! next time the log is opened for appending, which keeps recovery itself
//! read-only and therefore idempotent.

mod checkpoint;
mod recovery;
mod wal;

pub use checkpoint::{
    list_manifests, load_latest_checkpoint, prune_checkpoints, write_checkpoint, CheckpointManifest,
};
pub use recovery::{recover, RecoveryOutcome, RecoveryReport};
pub use wal::{Wal, WalScan, WAL_FILE_NAME};

use std::path::Path;

/// Make a rename in `dir` durable. Directory fsync is a no-op on platforms
/// that don't support it; errors other than unsupported are real.
pub(crate) fn fsync_dir(dir: &Path) -> crate::error::Result<()> {
    match std::fs::File::open(dir) {
        Ok(d) => match d.sync_all() {
            Ok(()) => Ok(()),
            Err(e) if e.raw_os_error() == Some(libc_einval()) => Ok(()),
            Err(e) => Err(crate::error::Error::io(dir, e)),
        },
        Err(e) => Err(crate::error::Error::io(dir, e)),
    }
}

fn libc_einval() -> i32 {
    22
}
