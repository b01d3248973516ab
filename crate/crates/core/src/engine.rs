//! The engine: admission, epoch commit, inference serving, lifecycle.
//!
//! One admission front door stamps every transaction with `(ts, txn_id)`
//! under a single mutex, so admission order is the serial order. Updates
//! join the open batch; the commit coordinator seals a batch into an epoch
//! when it reaches `batch_max` transactions or the oldest has waited
//! `batch_timeout`, whichever comes first.
//!
//! Epoch commit walks a fixed sequence and nothing becomes visible before
//! its log record is durable:
//!
//!   seal -> parallel fold -> (serial re-eval if any op failed)
//!        -> log append (+fsync policy) -> parallel install
//!        -> watermark advance -> outcome emission
//!
//! Inference never enters a batch: it pins a snapshot at the current
//! watermark, reads, releases, and answers on the calling thread. Snapshot
//! reads can't block or be blocked by commits.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender, TrySendError};
use parking_lot::{Condvar, Mutex};

use crate::codec::{LogRecord, LoggedTxn};
use crate::durability::{
    prune_checkpoints, recover, write_checkpoint, CheckpointManifest, RecoveryReport, Wal, WAL_FILE_NAME,
};
use crate::error::{Error, Result};
use crate::exec::{align_shadow_values, shadow_execute, ExecutorPool};
use crate::store::{ShardKey, StateStore, StoreConfig};
use crate::txn::{
    seal_epoch, AdmittedTxn, EpochPlan, ReadResult, RejectReason, Transaction, TxnKind, TxnOutcome, TxnStatus,
};

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub store: StoreConfig,
    pub executors: u32,
    /// Seal the open batch at this many transactions...
    pub batch_max: u32,
    /// ...or once the oldest admitted transaction has waited this long.
    /// Zero means seal as soon as the batch is non-empty.
    pub batch_timeout: Duration,
    /// Admitted-but-unresolved updates beyond this are refused.
    pub max_pending: u32,
    /// Fsync the log every N epochs; 0 = never (throughput studies).
    pub fsync_every: u32,
    /// Checkpoint every N epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: u32,
    pub checkpoint_retain: u32,
    /// Without a data dir the engine runs volatile: no log, no checkpoints,
    /// no recovery. Some tests want exactly that.
    pub data_dir: Option<PathBuf>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            store: StoreConfig::default(),
            executors: 4,
            batch_max: 256,
            batch_timeout: Duration::from_millis(5),
            max_pending: 16384,
            fsync_every: 1,
            checkpoint_every: 64,
            checkpoint_retain: 2,
            data_dir: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.store.validate()?;
        if self.executors == 0 {
            return Err(Error::invalid("executors must be >= 1"));
        }
        if self.batch_max == 0 {
            return Err(Error::invalid("batch_max must be >= 1"));
        }
        if self.checkpoint_every > 0 && self.data_dir.is_none() {
            return Err(Error::invalid("checkpointing requires a data dir"));
        }
        if self.checkpoint_retain == 0 {
            return Err(Error::invalid("checkpoint_retain must be >= 1"));
        }
        Ok(())
    }
}

/// Result of a successful `submit`.
#[derive(Debug)]
pub enum Admission {
    /// Update accepted into the open batch; the outcome arrives on the
    /// outcome stream once its epoch commits.
    Update { txn_id: u64, ts: u64 },
    /// Inference served synchronously; this is the whole outcome.
    Inference(Box<TxnOutcome>),
}

/// Result of a refused `submit`. The same information is also emitted as a
/// rejected outcome on the outcome stream.
#[derive(Debug, Clone)]
pub struct Rejection {
    pub txn_id: u64,
    pub ts: u64,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default)]
pub struct EngineStats {
    pub submitted_updates: u64,
    pub submitted_inference: u64,
    pub committed_updates: u64,
    pub inference_served: u64,
    pub rejected_validation: u64,
    pub rejected_backpressure: u64,
    pub rejected_halted: u64,
    pub epochs_committed: u64,
    pub watermark: u64,
    pub wal_len: u64,
    pub executor_busy_ns: Vec<u64>,
    pub uptime: Duration,
}

struct AdmissionState {
    clock: u64,
    open: Vec<AdmittedTxn>,
    first_at: Option<Instant>,
    seal_now: bool,
}

struct Counters {
    submitted_updates: AtomicU64,
    submitted_inference: AtomicU64,
    committed_updates: AtomicU64,
    inference_served: AtomicU64,
    rejected_validation: AtomicU64,
    rejected_backpressure: AtomicU64,
    rejected_halted: AtomicU64,
    epochs_committed: AtomicU64,
}

struct Shared {
    cfg: EngineConfig,
    store: Arc<StateStore>,
    admission: Mutex<AdmissionState>,
    batch_cv: Condvar,
    pending: AtomicU64,
    halted: AtomicBool,
    shutting_down: AtomicBool,
    /// Hard-stop flag for crash drills: abandon work, skip draining.
    crashing: AtomicBool,
    outcome_tx: Sender<TxnOutcome>,
    counters: Counters,
    wal: Mutex<Option<Wal>>,
    next_ckpt_seq: AtomicU64,
    /// Highest stamp in a durable epoch; checkpoints record it so the clock
    /// floor survives log pruning. Stamps of work lost in a crash may be
    /// reissued, which is fine: nothing durable refers to them.
    last_committed_ts: AtomicU64,
    started_at: Instant,
}

impl Shared {
    fn emit(&self, outcome: TxnOutcome) {
        let _ = self.outcome_tx.send(outcome);
    }

    fn stamp(&self, adm: &mut AdmissionState) -> (u64, u64) {
        adm.clock += 1;
        (adm.clock, adm.clock)
    }

    fn reject(&self, txn_id: u64, ts: u64, kind: TxnKind, reason: RejectReason, since: Instant) -> Rejection {
        match reason {
            RejectReason::Validation(_) => self.counters.rejected_validation.fetch_add(1, Ordering::Relaxed),
            RejectReason::Backpressure => self.counters.rejected_backpressure.fetch_add(1, Ordering::Relaxed),
            RejectReason::Halted => self.counters.rejected_halted.fetch_add(1, Ordering::Relaxed),
        };
        self.emit(TxnOutcome {
            txn_id,
            ts,
            kind,
            status: TxnStatus::Rejected { reason: reason.clone() },
            reads: Vec::new(),
            latency_ns: since.elapsed().as_nanos() as u64,
        });
        Rejection { txn_id, ts, reason }
    }
}

struct CheckpointJob {
    seq: u64,
    epoch: u64,
    clock: u64,
    snap: crate::store::SnapshotHandle,
}

pub struct Engine {
    shared: Arc<Shared>,
    outcome_rx: Receiver<TxnOutcome>,
    coordinator: Option<std::thread::JoinHandle<()>>,
    checkpointer: Option<std::thread::JoinHandle<()>>,
    ckpt_tx: Option<Sender<CheckpointJob>>,
    executor_busy: Arc<Mutex<Vec<u64>>>,
    recovery: Option<RecoveryReport>,
}

impl Engine {
    pub fn open(cfg: EngineConfig) -> Result<Engine> {
        cfg.validate()?;

        let mut recovery = None;
        let mut clock0 = 0u64;
        let mut next_seq = 1u64;
        let (store, wal) = match &cfg.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let out = recover(dir, cfg.store)?;
                let wal = Wal::open(&dir.join(WAL_FILE_NAME), out.wal_valid_len, out.wal_last_epoch, cfg.fsync_every)?;
                clock0 = out.max_ts;
                next_seq = out.next_checkpoint_seq;
                if out.report.restored_epoch > 0 || out.report.truncated_bytes > 0 {
                    recovery = Some(out.report.clone());
                }
                (out.store, Some(wal))
            }
            None => (StateStore::new(cfg.store)?, None),
        };

        let (outcome_tx, outcome_rx) = unbounded();
        let shared = Arc::new(Shared {
            cfg: cfg.clone(),
            store: Arc::new(store),
            admission: Mutex::new(AdmissionState { clock: clock0, open: Vec::new(), first_at: None, seal_now: false }),
            batch_cv: Condvar::new(),
            pending: AtomicU64::new(0),
            halted: AtomicBool::new(false),
            shutting_down: AtomicBool::new(false),
            crashing: AtomicBool::new(false),
            outcome_tx,
            counters: Counters {
                submitted_updates: AtomicU64::new(0),
                submitted_inference: AtomicU64::new(0),
                committed_updates: AtomicU64::new(0),
                inference_served: AtomicU64::new(0),
                rejected_validation: AtomicU64::new(0),
                rejected_backpressure: AtomicU64::new(0),
                rejected_halted: AtomicU64::new(0),
                epochs_committed: AtomicU64::new(0),
            },
            wal: Mutex::new(wal),
            next_ckpt_seq: AtomicU64::new(next_seq),
            last_committed_ts: AtomicU64::new(clock0),
            started_at: Instant::now(),
        });

        let executor_busy = Arc::new(Mutex::new(vec![0u64; cfg.executors as usize]));

        let (ckpt_tx, ckpt_rx) = bounded::<CheckpointJob>(1);
        let checkpointer = if cfg.data_dir.is_some() && cfg.checkpoint_every > 0 {
            let shared2 = Arc::clone(&shared);
            Some(
                std::thread::Builder::new()
                    .name("tstream-ckpt".into())
                    .spawn(move || checkpoint_loop(shared2, ckpt_rx))
                    .expect("spawn checkpointer"),
            )
        } else {
            None
        };

        let coordinator = {
            let shared2 = Arc::clone(&shared);
            let busy2 = Arc::clone(&executor_busy);
            let ckpt_tx2 = ckpt_tx.clone();
            std::thread::Builder::new()
                .name("tstream-commit".into())
                .spawn(move || coordinator_loop(shared2, busy2, ckpt_tx2))
                .expect("spawn coordinator")
        };

        Ok(Engine {
            shared,
            outcome_rx,
            coordinator: Some(coordinator),
            checkpointer,
            ckpt_tx: Some(ckpt_tx),
            executor_busy,
            recovery,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.shared.cfg
    }

    pub fn store(&self) -> &Arc<StateStore> {
        &self.shared.store
    }

    pub fn watermark(&self) -> u64 {
        self.shared.store.watermark()
    }

    pub fn halted(&self) -> bool {
        self.shared.halted.load(Ordering::Acquire)
    }

    pub fn recovery_report(&self) -> Option<&RecoveryReport> {
        self.recovery.as_ref()
    }

    /// The outcome stream: exactly one entry per submitted transaction.
    /// Intended for a single consumer; clones steal from each other.
    pub fn outcomes(&self) -> Receiver<TxnOutcome> {
        self.outcome_rx.clone()
    }

    pub fn wal_len(&self) -> u64 {
        self.shared.wal.lock().as_ref().map(|w| w.len()).unwrap_or(0)
    }

    /// Admit one transaction. Updates come back as a ticket; inference is
    /// served before returning. Refusals also emit a rejected outcome.
    pub fn submit(&self, txn: Transaction) -> std::result::Result<Admission, Rejection> {
        let t0 = Instant::now();
        let kind = txn.kind;
        match kind {
            TxnKind::Update => self.shared.counters.submitted_updates.fetch_add(1, Ordering::Relaxed),
            TxnKind::Inference => self.shared.counters.submitted_inference.fetch_add(1, Ordering::Relaxed),
        };

        // Validation is pure; keep it outside the admission lock.
        let valid = txn.validate();

        let mut adm = self.shared.admission.lock();
        let (ts, txn_id) = self.shared.stamp(&mut adm);
        if self.shared.halted.load(Ordering::Acquire) {
            drop(adm);
            return Err(self.shared.reject(txn_id, ts, kind, RejectReason::Halted, t0));
        }
        if let Err(msg) = valid {
            drop(adm);
            return Err(self.shared.reject(txn_id, ts, kind, RejectReason::Validation(msg), t0));
        }
        match kind {
            TxnKind::Update => {
                if self.shared.pending.load(Ordering::Acquire) >= self.shared.cfg.max_pending as u64 {
                    drop(adm);
                    return Err(self.shared.reject(txn_id, ts, kind, RejectReason::Backpressure, t0));
                }
                self.shared.pending.fetch_add(1, Ordering::AcqRel);
                adm.open.push(AdmittedTxn { txn_id, ts, admitted_at: t0, txn });
                if adm.first_at.is_none() {
                    adm.first_at = Some(t0);
                }
                drop(adm);
                // Wakes the coordinator to arm the timeout on first admission
                // and to seal when the batch fills; cheap when it's awake.
                self.shared.batch_cv.notify_all();
                Ok(Admission::Update { txn_id, ts })
            }
            TxnKind::Inference => {
                drop(adm);
                let outcome = self.serve_inference(txn_id, ts, t0, txn);
                self.shared.counters.inference_served.fetch_add(1, Ordering::Relaxed);
                self.shared.emit(outcome.clone());
                Ok(Admission::Inference(Box::new(outcome)))
            }
        }
    }

    fn serve_inference(&self, txn_id: u64, ts: u64, t0: Instant, txn: Transaction) -> TxnOutcome {
        let store = &self.shared.store;
        let snap = store.create_snapshot();
        let mut reads = Vec::with_capacity(txn.ops.len());
        for op in &txn.ops {
            let key = op.key();
            // get_at on a snapshot we hold can only fail on a store bug;
            // surface it as a rejection rather than unwinding.
            match store.get_at(key, &snap) {
                Ok(value) => reads.push(ReadResult { key: key.clone(), value }),
                Err(e) => {
                    let _ = store.release_snapshot(&snap);
                    return TxnOutcome {
                        txn_id,
                        ts,
                        kind: TxnKind::Inference,
                        status: TxnStatus::Rejected { reason: RejectReason::Validation(format!("internal: {e}")) },
                        reads: Vec::new(),
                        latency_ns: t0.elapsed().as_nanos() as u64,
                    };
                }
            }
        }
        let epoch = snap.epoch();
        let _ = store.release_snapshot(&snap);
        TxnOutcome {
            txn_id,
            ts,
            kind: TxnKind::Inference,
            status: TxnStatus::Committed { epoch },
            reads,
            latency_ns: t0.elapsed().as_nanos() as u64,
        }
    }

    /// Seal whatever is pending and wait until every admitted update has an
    /// outcome. Quiesce point for tests and orderly shutdown. Errors if the
    /// engine halted along the way (pending work was drained as rejections).
    pub fn flush(&self) -> Result<()> {
        loop {
            let drained = {
                let mut adm = self.shared.admission.lock();
                let drained = adm.open.is_empty() && self.shared.pending.load(Ordering::Acquire) == 0;
                if !drained {
                    adm.seal_now = true;
                }
                drained
            };
            if drained {
                return if self.halted() { Err(Error::Halted) } else { Ok(()) };
            }
            self.shared.batch_cv.notify_all();
            std::thread::sleep(Duration::from_micros(100));
        }
    }

    /// Synchronous checkpoint of the current watermark. Returns None when
    /// the engine runs volatile.
    pub fn checkpoint_now(&self) -> Result<Option<CheckpointManifest>> {
        let dir = match &self.shared.cfg.data_dir {
            Some(d) => d.clone(),
            None => return Ok(None),
        };
        let seq = self.shared.next_ckpt_seq.fetch_add(1, Ordering::AcqRel);
        let clock = self.shared.last_committed_ts.load(Ordering::Acquire);
        let snap = self.shared.store.create_snapshot();
        let epoch = snap.epoch();
        let entries = self.shared.store.dump(&snap)?;
        let manifest = write_checkpoint(&dir, seq, epoch, clock, &entries)?;
        let _ = self.shared.store.release_snapshot(&snap);
        let retained = prune_checkpoints(&dir, self.shared.cfg.checkpoint_retain as usize)?;
        prune_wal_behind(&self.shared, &retained)?;
        Ok(Some(manifest))
    }

    pub fn stats(&self) -> EngineStats {
        let c = &self.shared.counters;
        EngineStats {
            submitted_updates: c.submitted_updates.load(Ordering::Relaxed),
            submitted_inference: c.submitted_inference.load(Ordering::Relaxed),
            committed_updates: c.committed_updates.load(Ordering::Relaxed),
            inference_served: c.inference_served.load(Ordering::Relaxed),
            rejected_validation: c.rejected_validation.load(Ordering::Relaxed),
            rejected_backpressure: c.rejected_backpressure.load(Ordering::Relaxed),
            rejected_halted: c.rejected_halted.load(Ordering::Relaxed),
            epochs_committed: c.epochs_committed.load(Ordering::Relaxed),
            watermark: self.shared.store.watermark(),
            wal_len: self.wal_len(),
            executor_busy_ns: self.executor_busy.lock().clone(),
            uptime: self.shared.started_at.elapsed(),
        }
    }

    /// Orderly shutdown: drain admitted work, stop threads, sync the log.
    pub fn shutdown(mut self) -> Result<()> {
        self.stop(false);
        let mut wal = self.shared.wal.lock();
        if let Some(wal) = wal.as_mut() {
            wal.sync()?;
        }
        Ok(())
    }

    /// Crash drill: abandon pending work and stop without a final sync. The
    /// data directory is left exactly as a real crash at this instant would
    /// (modulo whatever the OS already flushed).
    pub fn crash(mut self) {
        self.shared.crashing.store(true, Ordering::Release);
        self.stop(true);
    }

    fn stop(&mut self, crashing: bool) {
        self.shared.shutting_down.store(true, Ordering::Release);
        if crashing {
            self.shared.crashing.store(true, Ordering::Release);
        }
        self.shared.batch_cv.notify_all();
        if let Some(h) = self.coordinator.take() {
            let _ = h.join();
        }
        // Dropping the sender ends the checkpoint loop.
        self.ckpt_tx.take();
        if let Some(h) = self.checkpointer.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if self.coordinator.is_some() {
            self.stop(false);
        }
    }
}

/// One iteration's batch, or None when it is time to exit.
fn next_batch(shared: &Shared) -> Option<Vec<AdmittedTxn>> {
    let cfg = &shared.cfg;
    let mut adm = shared.admission.lock();
    loop {
        if shared.crashing.load(Ordering::Acquire) {
            return None;
        }
        if !adm.open.is_empty() {
            let deadline = adm.first_at.expect("first_at set with open batch") + cfg.batch_timeout;
            let due = adm.open.len() >= cfg.batch_max as usize
                || cfg.batch_timeout.is_zero()
                || adm.seal_now
                || shared.shutting_down.load(Ordering::Acquire)
                || shared.halted.load(Ordering::Acquire)
                || Instant::now() >= deadline;
            if due {
                adm.seal_now = false;
                adm.first_at = None;
                return Some(std::mem::take(&mut adm.open));
            }
            shared.batch_cv.wait_until(&mut adm, deadline);
        } else {
            if shared.shutting_down.load(Ordering::Acquire) || shared.halted.load(Ordering::Acquire) {
                return None;
            }
            shared.batch_cv.wait_for(&mut adm, Duration::from_millis(50));
        }
    }
}

fn coordinator_loop(shared: Arc<Shared>, busy_out: Arc<Mutex<Vec<u64>>>, ckpt_tx: Sender<CheckpointJob>) {
    let pool = ExecutorPool::spawn(Arc::clone(&shared.store), shared.cfg.executors);

    while let Some(batch) = next_batch(&shared) {
        let epoch = shared.store.watermark() + 1;
        let plan = Arc::new(seal_epoch(epoch, batch, &shared.cfg.store, pool.executors()));

        // Phase 1: parallel fold, global failure verdict.
        let (fast_values, failures) = pool.execute(&plan);
        let (rejected, values) = if failures.is_empty() {
            (std::collections::HashMap::new(), fast_values)
        } else {
            // Serial re-evaluation defines the exact rejection set and the
            // surviving values; the fast fold is discarded wholesale.
            let base_epoch = plan.epoch_id - 1;
            let (rejected, shadow_values) = shadow_execute(&plan, |k: &ShardKey| shared.store.get_visible(k, base_epoch));
            let values = align_shadow_values(&plan, shadow_values);
            (rejected, values)
        };

        // Log record holds committed transactions only, admission order.
        let record = LogRecord {
            epoch_id: epoch,
            txns: plan
                .txns
                .iter()
                .enumerate()
                .filter(|(idx, _)| !rejected.contains_key(&(*idx as u32)))
                .map(|(_, at)| LoggedTxn { txn_id: at.txn_id, ts: at.ts, ops: at.txn.ops.clone() })
                .collect(),
        };
        {
            let mut wal = shared.wal.lock();
            if let Some(wal) = wal.as_mut() {
                if let Err(e) = wal.append(&record) {
                    log::error!("log append failed for epoch {epoch}: {e}; halting");
                    halt_with_batch(&shared, &plan);
                    break;
                }
            }
        }

        // Phase 2: install, then make the epoch visible.
        if let Err(e) = pool.install(&plan, values) {
            log::error!("version install failed for epoch {epoch}: {e}; halting");
            halt_with_batch(&shared, &plan);
            break;
        }
        if let Err(e) = shared.store.advance_watermark(epoch) {
            log::error!("watermark advance failed for epoch {epoch}: {e}; halting");
            halt_with_batch(&shared, &plan);
            break;
        }
        shared.counters.epochs_committed.fetch_add(1, Ordering::Relaxed);
        if let Some(last) = record.txns.last() {
            shared.last_committed_ts.store(last.ts, Ordering::Release);
        }

        // Outcomes, one per admitted transaction, admission order.
        for (idx, at) in plan.txns.iter().enumerate() {
            let status = match rejected.get(&(idx as u32)) {
                Some(msg) => {
                    shared.counters.rejected_validation.fetch_add(1, Ordering::Relaxed);
                    TxnStatus::Rejected { reason: RejectReason::Validation(msg.clone()) }
                }
                None => {
                    shared.counters.committed_updates.fetch_add(1, Ordering::Relaxed);
                    TxnStatus::Committed { epoch }
                }
            };
            shared.emit(TxnOutcome {
                txn_id: at.txn_id,
                ts: at.ts,
                kind: TxnKind::Update,
                status,
                reads: Vec::new(),
                latency_ns: at.admitted_at.elapsed().as_nanos() as u64,
            });
            shared.pending.fetch_sub(1, Ordering::AcqRel);
        }

        if shared.cfg.checkpoint_every > 0 && epoch.is_multiple_of(shared.cfg.checkpoint_every as u64) {
            let job = CheckpointJob {
                seq: shared.next_ckpt_seq.fetch_add(1, Ordering::AcqRel),
                epoch,
                clock: shared.last_committed_ts.load(Ordering::Acquire),
                snap: shared.store.create_snapshot(),
            };
            match ckpt_tx.try_send(job) {
                Ok(()) => {}
                Err(TrySendError::Full(job)) => {
                    log::warn!("checkpoint at epoch {} skipped: previous one still running", job.epoch);
                }
                Err(TrySendError::Disconnected(_)) => {}
            }
        }
    }

    // Reject whatever is still admitted; every transaction gets an outcome
    // even when the engine stops early. Crash drills skip this on purpose.
    if !shared.crashing.load(Ordering::Acquire) {
        let leftovers = {
            let mut adm = shared.admission.lock();
            adm.first_at = None;
            std::mem::take(&mut adm.open)
        };
        for at in leftovers {
            shared.counters.rejected_halted.fetch_add(1, Ordering::Relaxed);
            shared.emit(TxnOutcome {
                txn_id: at.txn_id,
                ts: at.ts,
                kind: TxnKind::Update,
                status: TxnStatus::Rejected { reason: RejectReason::Halted },
                reads: Vec::new(),
                latency_ns: at.admitted_at.elapsed().as_nanos() as u64,
            });
            shared.pending.fetch_sub(1, Ordering::AcqRel);
        }
    }

    *busy_out.lock() = pool.busy_ns();
    pool.shutdown();
}

/// Halt cleanly: nothing from this epoch became visible, so every one of its
/// transactions is rejected, and the engine stops accepting work.
fn halt_with_batch(shared: &Shared, plan: &EpochPlan) {
    shared.halted.store(true, Ordering::Release);
    for at in &plan.txns {
        shared.counters.rejected_halted.fetch_add(1, Ordering::Relaxed);
        shared.emit(TxnOutcome {
            txn_id: at.txn_id,
            ts: at.ts,
            kind: TxnKind::Update,
            status: TxnStatus::Rejected { reason: RejectReason::Halted },
            reads: Vec::new(),
            latency_ns: at.admitted_at.elapsed().as_nanos() as u64,
        });
        shared.pending.fetch_sub(1, Ordering::AcqRel);
    }
}

/// Drop log records already covered by a checkpoint, but only through the
/// epoch of the oldest retained one: recovery must be able to fall back past
/// a corrupt newest checkpoint onto the older one plus the remaining log,
/// so with a single checkpoint on disk nothing is pruned.
fn prune_wal_behind(shared: &Shared, retained: &[CheckpointManifest]) -> Result<()> {
    if retained.len() < 2 {
        return Ok(());
    }
    if let Some(wal) = shared.wal.lock().as_mut() {
        wal.prune_through(retained[0].epoch_id)?;
    }
    Ok(())
}

fn checkpoint_loop(shared: Arc<Shared>, rx: Receiver<CheckpointJob>) {
    let dir = shared.cfg.data_dir.clone().expect("checkpointer requires data dir");
    while let Ok(job) = rx.recv() {
        let result = (|| -> Result<()> {
            let entries = shared.store.dump(&job.snap)?;
            write_checkpoint(&dir, job.seq, job.epoch, job.clock, &entries)?;
            let _ = shared.store.release_snapshot(&job.snap);
            let retained = prune_checkpoints(&dir, shared.cfg.checkpoint_retain as usize)?;
            prune_wal_behind(&shared, &retained)
        })();
        if let Err(e) = result {
            // Checkpoint failure degrades durability to log-only; it does
            // not corrupt committed state, so the engine keeps running.
            log::error!("checkpoint seq {} at epoch {} failed: {e}", job.seq, job.epoch);
        }
    }
}
