//! Crash recovery: checkpoint restore plus deterministic log replay.
//!
//! Recovery is a pure read of the data directory. It picks the newest intact
//! checkpoint, replays every log record above the checkpoint's epoch through
//! the same chain fold the live engine uses, and reports what it found. It
//! never writes: running it twice over the same directory yields the same
//! state and the same report, byte for byte. The torn tail it detects is
//! physically removed later, when the engine reopens the log for appending.

use std::path::Path;
use std::time::Instant;

use crate::codec::LogRecord;
use crate::error::{Error, Result};
use crate::exec::replay_plan;
use crate::store::{StateStore, StoreConfig};
use crate::txn::{seal_epoch, AdmittedTxn, Transaction, TxnKind};

use super::checkpoint::{list_manifests, load_latest_checkpoint};
use super::wal::{scan_file, WAL_FILE_NAME};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryReport {
    /// Watermark after recovery: every epoch at or below this is restored.
    pub restored_epoch: u64,
    /// Epoch of the checkpoint used as the base (0 = no checkpoint).
    pub checkpoint_epoch: u64,
    /// Log records replayed on top of the checkpoint.
    pub replayed_epochs: u64,
    /// Bytes past the valid log prefix (torn or corrupt tail).
    pub truncated_bytes: u64,
    /// Highest admission stamp restored; stamps issued after recovery are
    /// strictly greater.
    pub max_ts: u64,
}

/// Everything the engine needs to resume after recovery.
pub struct RecoveryOutcome {
    pub store: StateStore,
    pub report: RecoveryReport,
    /// Valid log prefix length; the reopened log truncates to this.
    pub wal_valid_len: u64,
    /// Epoch of the last valid log record (0 if none).
    pub wal_last_epoch: u64,
    /// Largest admission ts seen in the log; the clock resumes above it.
    pub max_ts: u64,
    pub next_checkpoint_seq: u64,
}

pub fn recover(dir: &Path, store_cfg: StoreConfig) -> Result<RecoveryOutcome> {
    let t0 = Instant::now();
    let store = StateStore::new(store_cfg)?;

    let checkpoint = load_latest_checkpoint(dir)?;
    let checkpoint_epoch = checkpoint.as_ref().map(|(m, _)| m.epoch_id).unwrap_or(0);
    let checkpoint_clock = checkpoint.as_ref().map(|(m, _)| m.clock).unwrap_or(0);
    if let Some((manifest, entries)) = checkpoint {
        log::info!("restoring checkpoint seq {} at epoch {}", manifest.seq, manifest.epoch_id);
        store.restore(entries, manifest.epoch_id)?;
    }

    let scan = scan_file(&dir.join(WAL_FILE_NAME))?;
    let wal_last_epoch = scan.records.last().map(|r| r.epoch_id).unwrap_or(0);
    // Pruning can leave the checkpoint as the only witness of old stamps,
    // so the clock floor is the max over both sources.
    let max_ts = scan
        .records
        .iter()
        .flat_map(|r| r.txns.iter().map(|t| t.ts))
        .max()
        .unwrap_or(0)
        .max(checkpoint_clock);

    let mut replayed = 0u64;
    for record in &scan.records {
        if record.epoch_id <= checkpoint_epoch {
            continue;
        }
        let expect = store.watermark() + 1;
        if record.epoch_id != expect {
            return Err(Error::Corrupt(format!(
                "log gap: expected epoch {expect}, found {}",
                record.epoch_id
            )));
        }
        replay_record(&store, record)?;
        replayed += 1;
    }

    let next_checkpoint_seq = list_manifests(dir)?.last().map(|m| m.seq + 1).unwrap_or(1);
    let report = RecoveryReport {
        restored_epoch: store.watermark(),
        checkpoint_epoch,
        replayed_epochs: replayed,
        truncated_bytes: scan.truncated_bytes,
        max_ts,
    };
    log::info!(
        "recovered to epoch {} ({} replayed, {} tail bytes dropped) in {:?}",
        report.restored_epoch,
        report.replayed_epochs,
        report.truncated_bytes,
        t0.elapsed()
    );
    Ok(RecoveryOutcome {
        store,
        report,
        wal_valid_len: scan.valid_len,
        wal_last_epoch,
        max_ts,
        next_checkpoint_seq,
    })
}

/// A log record holds only committed transactions, so replay folds them
/// directly; any failure means the log and the engine disagree, which is
/// corruption, not a rejection.
fn replay_record(store: &StateStore, record: &LogRecord) -> Result<()> {
    let batch: Vec<AdmittedTxn> = record
        .txns
        .iter()
        .map(|t| AdmittedTxn {
            txn_id: t.txn_id,
            ts: t.ts,
            admitted_at: Instant::now(),
            txn: Transaction { kind: TxnKind::Update, ops: t.ops.clone() },
        })
        .collect();
    if batch.is_empty() {
        // Epoch whose transactions were all rejected: nothing to fold, but
        // the watermark still advances to keep epoch numbering contiguous.
        return store.advance_watermark(record.epoch_id);
    }
    let plan = seal_epoch(record.epoch_id, batch, store.config(), 1);
    replay_plan(store, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LoggedTxn;
    use crate::durability::wal::Wal;
    use crate::durability::write_checkpoint;
    use crate::store::{ShardKey, ShardValue};
    use crate::txn::StateOp;

    fn delta_txn(id: u64, key: &str, d: f64) -> LoggedTxn {
        LoggedTxn {
            txn_id: id,
            ts: id,
            ops: vec![StateOp::Apply { key: ShardKey::params(key).unwrap(), delta: vec![d] }],
        }
    }

    #[test]
    fn replay_from_empty_dir_is_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let out = recover(dir.path(), StoreConfig::default()).unwrap();
        assert_eq!(out.report.restored_epoch, 0);
        assert_eq!(out.store.key_count(), 0);
        assert_eq!(out.next_checkpoint_seq, 1);
    }

    #[test]
    fn replay_wal_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut wal = Wal::open(&dir.path().join(WAL_FILE_NAME), 0, 0, 1).unwrap();
        wal.append(&LogRecord { epoch_id: 1, txns: vec![delta_txn(1, "k", 2.0)] }).unwrap();
        wal.append(&LogRecord { epoch_id: 2, txns: vec![delta_txn(2, "k", 0.5)] }).unwrap();
        drop(wal);
        let out = recover(dir.path(), StoreConfig::default()).unwrap();
        assert_eq!(out.report.restored_epoch, 2);
        assert_eq!(out.report.replayed_epochs, 2);
        assert_eq!(out.max_ts, 2);
        let snap = out.store.create_snapshot();
        let v = out.store.get_at(&ShardKey::params("k").unwrap(), &snap).unwrap().unwrap();
        assert_eq!(v.as_params().unwrap(), &[2.5]);
    }

    #[test]
    fn checkpoint_plus_tail_replay() {
        let dir = tempfile::tempdir().unwrap();
        let mut wal = Wal::open(&dir.path().join(WAL_FILE_NAME), 0, 0, 1).unwrap();
        for e in 1..=4u64 {
            wal.append(&LogRecord { epoch_id: e, txns: vec![delta_txn(e, "k", 1.0)] }).unwrap();
        }
        // Checkpoint captures state as of epoch 3 (value 3.0).
        let entries = vec![(ShardKey::params("k").unwrap(), std::sync::Arc::new(ShardValue::Params(vec![3.0])))];
        write_checkpoint(dir.path(), 1, 3, 3, &entries).unwrap();
        let out = recover(dir.path(), StoreConfig::default()).unwrap();
        assert_eq!(out.report.checkpoint_epoch, 3);
        assert_eq!(out.report.replayed_epochs, 1);
        assert_eq!(out.report.restored_epoch, 4);
        let snap = out.store.create_snapshot();
        let v = out.store.get_at(&ShardKey::params("k").unwrap(), &snap).unwrap().unwrap();
        assert_eq!(v.as_params().unwrap(), &[4.0]);
        assert_eq!(out.next_checkpoint_seq, 2);
    }

    #[test]
    fn torn_tail_is_reported_and_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(WAL_FILE_NAME);
        let mut wal = Wal::open(&path, 0, 0, 1).unwrap();
        wal.append(&LogRecord { epoch_id: 1, txns: vec![delta_txn(1, "k", 1.0)] }).unwrap();
        let keep = wal.len();
        wal.append(&LogRecord { epoch_id: 2, txns: vec![delta_txn(2, "k", 9.0)] }).unwrap();
        drop(wal);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(keep as usize + 5);
        std::fs::write(&path, &bytes).unwrap();

        let out = recover(dir.path(), StoreConfig::default()).unwrap();
        assert_eq!(out.report.restored_epoch, 1);
        assert_eq!(out.report.truncated_bytes, 5);
        assert_eq!(out.wal_valid_len, keep);
        let snap = out.store.create_snapshot();
        let v = out.store.get_at(&ShardKey::params("k").unwrap(), &snap).unwrap().unwrap();
        assert_eq!(v.as_params().unwrap(), &[1.0]);
    }

    #[test]
    fn double_recovery_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(WAL_FILE_NAME);
        let mut wal = Wal::open(&path, 0, 0, 1).unwrap();
        for e in 1..=3u64 {
            wal.append(&LogRecord { epoch_id: e, txns: vec![delta_txn(e, "k", e as f64)] }).unwrap();
        }
        drop(wal);
        // Tear the last record.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();

        let one = recover(dir.path(), StoreConfig::default()).unwrap();
        let two = recover(dir.path(), StoreConfig::default()).unwrap();
        assert_eq!(one.report, two.report);
        let snap1 = one.store.create_snapshot();
        let snap2 = two.store.create_snapshot();
        let d1 = crate::codec::encode_dump(&one.store.dump(&snap1).unwrap());
        let d2 = crate::codec::encode_dump(&two.store.dump(&snap2).unwrap());
        assert_eq!(d1, d2);
    }

    #[test]
    fn log_gap_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut wal = Wal::open(&dir.path().join(WAL_FILE_NAME), 0, 0, 1).unwrap();
        wal.append(&LogRecord { epoch_id: 1, txns: vec![] }).unwrap();
        wal.append(&LogRecord { epoch_id: 3, txns: vec![] }).unwrap();
        drop(wal);
        assert!(matches!(recover(dir.path(), StoreConfig::default()), Err(Error::Corrupt(_))));
    }

    // Pruning can leave the checkpoint holding stamps the log no longer
    // shows; the clock must still resume above them.
    #[test]
    fn clock_floor_comes_from_checkpoint_when_log_is_behind() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![(ShardKey::params("k").unwrap(), std::sync::Arc::new(ShardValue::Params(vec![7.0])))];
        write_checkpoint(dir.path(), 1, 5, 41, &entries).unwrap();
        let mut wal = Wal::open(&dir.path().join(WAL_FILE_NAME), 0, 0, 1).unwrap();
        wal.append(&LogRecord { epoch_id: 6, txns: vec![delta_txn(9, "k", 1.0)] }).unwrap();
        drop(wal);
        let out = recover(dir.path(), StoreConfig::default()).unwrap();
        assert_eq!(out.max_ts, 41);
        assert_eq!(out.report.max_ts, 41);
        assert_eq!(out.report.restored_epoch, 6);
    }
}
