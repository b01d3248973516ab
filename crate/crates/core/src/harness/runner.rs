//! Trace replay against the real engine.
//!
//! The runner is single-threaded by design: events enter the ingest
//! pipeline one at a time, emitted work items are mapped to transactions
//! and submitted in order, and outcomes are drained off the engine's
//! stream as they appear. Single-threaded submission means admission
//! stamps are issued in event order, which is what makes a run comparable
//! to the oracle and resumable after a crash.
//!
//! Every tally the report carries comes from the outcome stream, not from
//! the submit return values: one outcome per submission is itself one of
//! the properties being checked, so counting anywhere else would paper
//! over a lost outcome.
//!
//! The crash drill runs the same loop but watches the log length. At the
//! chosen byte offset it drops the engine without ceremony, truncates the
//! log file to simulate a torn tail, reopens, and resumes submitting from
//! the first event whose transaction did not survive. The final dump must
//! be byte-identical to an uninterrupted run: a transaction's fate depends
//! only on the committed prefix before it, never on which epoch it rode.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use crossbeam_channel::Receiver;

use crate::codec::encode_dump;
use crate::durability::WAL_FILE_NAME;
use crate::engine::{Admission, Engine};
use crate::error::{Error, Result};
use crate::ingest::{IngestConfig, IngestCounters, Ingestor, StreamEvent, WorkItem, WorkQueue};
use crate::learn::{predict, OnlineLearner};
use crate::txn::{RejectReason, Transaction, TxnKind, TxnOutcome, TxnStatus};

use super::report::{engine_section, LatencySummary, MetricsReport, StalenessHistogram};
use super::{
    direct_inference_txn, direct_update_txn, healthcare_example, healthcare_model_spec, pipeline_for,
    Arrival, Scenario, HEALTHCARE_FEATURES,
};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub scenario: Scenario,
    pub arrival: Arrival,
    pub engine: crate::engine::EngineConfig,
}

#[derive(Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    /// Key-ordered state dump at the final watermark.
    pub dump: Vec<u8>,
}

#[derive(Debug)]
pub struct CrashOutput {
    /// Report and dump of the resumed portion of the run.
    pub output: RunOutput,
    pub recovered_epoch: u64,
    pub recovery_ms: u64,
    /// Index of the first event submitted again after recovery.
    pub resumed_at_event: u64,
    pub max_recovered_stamp: u64,
}

/// Encode the engine's current visible state, key-ordered.
pub fn engine_dump(engine: &Engine) -> Result<Vec<u8>> {
    let store = engine.store();
    let snap = store.create_snapshot();
    let entries = store.dump(&snap);
    let _ = store.release_snapshot(&snap);
    Ok(encode_dump(&entries?))
}

pub fn run_events(events: &[StreamEvent], opts: &RunOptions) -> Result<RunOutput> {
    let (ingestor, queue) = Ingestor::new(pipeline_for(opts.scenario), IngestConfig::default())?;
    let mut driver = Driver::new(Engine::open(opts.engine.clone())?, opts)?;
    let pacer = Pacer::new(opts.arrival);
    let t0 = Instant::now();
    for (idx, event) in events.iter().enumerate() {
        pacer.wait(idx as u64);
        driver.step(&ingestor, &queue, idx as u64, event)?;
    }
    driver.settle(&ingestor, &queue)?;
    let wall_ms = t0.elapsed().as_millis() as u64;
    driver.finish(events.len() as u64, queue.counters(), wall_ms, opts)
}

/// Crash drill: run until the log reaches `crash_at_wal_len` bytes, kill
/// the engine, truncate the log to exactly that length, recover, and
/// resume from the first event not covered by the recovered state.
///
/// Pass-through scenario only: resuming re-ingests a suffix of the trace,
/// which is only equivalent when the pipeline carries no window state
/// across events.
pub fn run_with_crash(
    events: &[StreamEvent],
    opts: &RunOptions,
    crash_at_wal_len: u64,
) -> Result<CrashOutput> {
    if opts.scenario != Scenario::Synthetic {
        return Err(Error::invalid("crash drills require the pass-through scenario"));
    }
    let dir = opts
        .engine
        .data_dir
        .clone()
        .ok_or_else(|| Error::invalid("crash drill requires a data dir"))?;

    // Phase one: run until the log is long enough, then pull the plug.
    let (ingestor, queue) = Ingestor::new(pipeline_for(opts.scenario), IngestConfig::default())?;
    let mut driver = Driver::new(Engine::open(opts.engine.clone())?, opts)?;
    let mut reached = false;
    for (idx, event) in events.iter().enumerate() {
        driver.step(&ingestor, &queue, idx as u64, event)?;
        // Sealing is asynchronous, so a fast submission loop can outrun the
        // log. Seal every few events so the length tracks the event index
        // and the crash lands mid-trace instead of after it.
        if idx % 8 == 7 {
            driver.engine.flush()?;
            driver.drain_nonblocking();
            if driver.engine.wal_len() >= crash_at_wal_len {
                reached = true;
                break;
            }
        }
    }
    if !reached {
        driver.engine.flush()?;
        reached = driver.engine.wal_len() >= crash_at_wal_len;
    }
    if !reached {
        let got = driver.engine.wal_len();
        driver.abandon();
        return Err(Error::invalid(format!(
            "log reached only {got} bytes, crash point {crash_at_wal_len} never hit"
        )));
    }
    let stamps = std::mem::take(&mut driver.update_stamps);
    driver.abandon();

    let wal_path = dir.join(WAL_FILE_NAME);
    let file = std::fs::OpenOptions::new()
        .write(true)
        .open(&wal_path)
        .map_err(|e| Error::io(&wal_path, e))?;
    let len = file.metadata().map_err(|e| Error::io(&wal_path, e))?.len();
    file.set_len(crash_at_wal_len.min(len)).map_err(|e| Error::io(&wal_path, e))?;
    file.sync_all().map_err(|e| Error::io(&wal_path, e))?;
    drop(file);

    // Phase two: recover and resume.
    let t0 = Instant::now();
    let engine = Engine::open(opts.engine.clone())?;
    let recovery_ms = t0.elapsed().as_millis().max(1) as u64;
    let (recovered_epoch, max_ts) = match engine.recovery_report() {
        Some(r) => (r.restored_epoch, r.max_ts),
        None => (0, 0),
    };
    let resume_at = if max_ts == 0 {
        0
    } else {
        match stamps.binary_search_by_key(&max_ts, |(id, _)| *id) {
            Ok(i) => stamps[i].1 as usize + 1,
            Err(_) => {
                return Err(Error::Corrupt(format!(
                    "recovered stamp {max_ts} does not belong to any submitted update"
                )))
            }
        }
    };

    let (ingestor, queue) = Ingestor::new(pipeline_for(opts.scenario), IngestConfig::default())?;
    let mut driver = Driver::new(engine, opts)?;
    for (idx, event) in events.iter().enumerate().skip(resume_at) {
        driver.step(&ingestor, &queue, idx as u64, event)?;
    }
    driver.settle(&ingestor, &queue)?;
    let wall_ms = t0.elapsed().as_millis() as u64;
    let mut out = driver.finish((events.len() - resume_at) as u64, queue.counters(), wall_ms, opts)?;
    out.report.recovery_ms = Some(recovery_ms);
    out.report.recovered_epoch = Some(recovered_epoch);
    Ok(CrashOutput {
        output: out,
        recovered_epoch,
        recovery_ms,
        resumed_at_event: resume_at as u64,
        max_recovered_stamp: max_ts,
    })
}

struct Pacer {
    start: Instant,
    per_sec: u32,
}

impl Pacer {
    fn new(arrival: Arrival) -> Pacer {
        let per_sec = match arrival {
            Arrival::FixedRate { per_sec } => per_sec,
            Arrival::ClosedLoop => 0,
        };
        Pacer { start: Instant::now(), per_sec }
    }

    fn wait(&self, i: u64) {
        if self.per_sec == 0 {
            return;
        }
        let target = self.start + Duration::from_nanos(i.saturating_mul(1_000_000_000 / self.per_sec as u64));
        let now = Instant::now();
        if target > now {
            std::thread::sleep(target - now);
        }
    }
}

struct Driver {
    engine: Engine,
    outcomes: Receiver<TxnOutcome>,
    learner: Option<OnlineLearner>,
    scenario: Scenario,
    closed_loop: bool,
    current_event: u64,

    updates_submitted: u64,
    updates_committed: u64,
    updates_rejected_validation: u64,
    updates_rejected_backpressure: u64,
    updates_rejected_other: u64,
    inference_submitted: u64,
    inference_served: u64,
    inference_rejected: u64,
    examples_skipped: u64,
    predictions: u64,

    outcomes_seen: u64,
    pending: HashSet<u64>,
    latencies: Vec<u64>,
    staleness: StalenessHistogram,
    /// (txn id, event index) per admitted update, ascending by id.
    update_stamps: Vec<(u64, u64)>,
}

impl Driver {
    fn new(engine: Engine, opts: &RunOptions) -> Result<Driver> {
        let outcomes = engine.outcomes();
        let learner = match opts.scenario {
            Scenario::Healthcare => Some(OnlineLearner::new(healthcare_model_spec())?),
            _ => None,
        };
        Ok(Driver {
            engine,
            outcomes,
            learner,
            scenario: opts.scenario,
            closed_loop: opts.arrival == Arrival::ClosedLoop,
            current_event: 0,
            updates_submitted: 0,
            updates_committed: 0,
            updates_rejected_validation: 0,
            updates_rejected_backpressure: 0,
            updates_rejected_other: 0,
            inference_submitted: 0,
            inference_served: 0,
            inference_rejected: 0,
            examples_skipped: 0,
            predictions: 0,
            outcomes_seen: 0,
            pending: HashSet::new(),
            latencies: Vec::new(),
            staleness: StalenessHistogram::default(),
            update_stamps: Vec::new(),
        })
    }

    /// One event: ingest it, then service whatever the pipeline emitted.
    fn step(&mut self, ingestor: &Ingestor, queue: &WorkQueue, idx: u64, event: &StreamEvent) -> Result<()> {
        self.current_event = idx;
        let _ = ingestor.ingest(event.clone());
        for item in queue.drain() {
            self.handle_item(&item)?;
        }
        self.drain_nonblocking();
        Ok(())
    }

    /// Close the pipeline, service the leftovers, and wait until every
    /// admitted update has reported back.
    fn settle(&mut self, ingestor: &Ingestor, queue: &WorkQueue) -> Result<()> {
        ingestor.finish();
        for item in queue.drain() {
            self.handle_item(&item)?;
        }
        self.engine.flush()?;
        self.drain_nonblocking();
        Ok(())
    }

    fn handle_item(&mut self, item: &WorkItem) -> Result<()> {
        match (self.scenario, item) {
            (Scenario::Healthcare, WorkItem::TrainExample { .. }) => {
                let Some((x, y)) = healthcare_example(item) else {
                    self.examples_skipped += 1;
                    return Ok(());
                };
                let learner = self.learner.as_ref().expect("healthcare driver has a learner");
                let read_txn = learner.read_txn();
                self.inference_submitted += 1;
                let reads = match self.engine.submit(read_txn) {
                    Ok(Admission::Inference(outcome)) if outcome.epoch().is_some() => outcome,
                    _ => {
                        self.examples_skipped += 1;
                        return Ok(());
                    }
                };
                let learner = self.learner.as_ref().expect("healthcare driver has a learner");
                let step = match learner.train_step(&reads, &x, y) {
                    Ok(s) => s,
                    Err(_) => {
                        self.examples_skipped += 1;
                        return Ok(());
                    }
                };
                self.submit_update(step.txn, Some(step.snapshot_epoch))
            }
            (_, WorkItem::TrainExample { features, .. }) => {
                let txn = direct_update_txn(features)?;
                self.submit_update(txn, None)
            }
            (Scenario::Healthcare, WorkItem::InferenceRequest { features, .. }) => {
                let learner = self.learner.as_ref().expect("healthcare driver has a learner");
                let read_txn = learner.read_txn();
                self.inference_submitted += 1;
                if let Ok(Admission::Inference(outcome)) = self.engine.submit(read_txn) {
                    let learner = self.learner.as_ref().expect("present above");
                    if let Ok(state) = learner.model_from_reads(&outcome) {
                        let mut x = [0.0f64; 2];
                        let mut have = 0;
                        for (i, want) in HEALTHCARE_FEATURES.iter().enumerate() {
                            if let Some((_, v)) = features.iter().find(|(n, _)| n == want) {
                                x[i] = *v;
                                have += 1;
                            }
                        }
                        if have == HEALTHCARE_FEATURES.len() {
                            let _ = predict(learner.spec().kind, &state.weights, state.bias, &x);
                            self.predictions += 1;
                        }
                    }
                }
                Ok(())
            }
            (_, WorkItem::InferenceRequest { features, .. }) => {
                let txn = direct_inference_txn(features)?;
                self.inference_submitted += 1;
                let _ = self.engine.submit(txn);
                Ok(())
            }
        }
    }

    fn submit_update(&mut self, txn: Transaction, snapshot_epoch: Option<u64>) -> Result<()> {
        self.updates_submitted += 1;
        match self.engine.submit(txn) {
            Ok(Admission::Update { txn_id, .. }) => {
                self.pending.insert(txn_id);
                self.update_stamps.push((txn_id, self.current_event));
                if let (Some(learner), Some(epoch)) = (self.learner.as_mut(), snapshot_epoch) {
                    learner.record_submitted(txn_id, epoch);
                }
                if self.closed_loop {
                    self.wait_for(txn_id)?;
                }
                Ok(())
            }
            Ok(Admission::Inference(_)) => Err(Error::invalid("update admitted as a read")),
            // The refusal also arrives as an outcome; it is counted there.
            Err(_rejection) => Ok(()),
        }
    }

    /// Seal now and block until `txn_id` reports back.
    fn wait_for(&mut self, txn_id: u64) -> Result<()> {
        self.engine.flush()?;
        let deadline = Instant::now() + Duration::from_secs(10);
        while self.pending.contains(&txn_id) {
            match self.outcomes.recv_deadline(deadline) {
                Ok(outcome) => self.absorb(outcome),
                Err(_) => {
                    return Err(Error::invalid(format!(
                        "no outcome for update {txn_id} within 10s of a flush"
                    )))
                }
            }
        }
        Ok(())
    }

    fn drain_nonblocking(&mut self) {
        while let Ok(outcome) = self.outcomes.try_recv() {
            self.absorb(outcome);
        }
    }

    fn absorb(&mut self, outcome: TxnOutcome) {
        self.outcomes_seen += 1;
        match outcome.kind {
            TxnKind::Update => {
                self.pending.remove(&outcome.txn_id);
                match &outcome.status {
                    TxnStatus::Committed { .. } => {
                        self.updates_committed += 1;
                        self.latencies.push(outcome.latency_ns);
                        if let Some(learner) = self.learner.as_mut() {
                            if let Some(staleness) = learner.note_outcome(&outcome) {
                                self.staleness.record(staleness);
                            }
                        }
                    }
                    TxnStatus::Rejected { reason } => match reason {
                        RejectReason::Validation(_) => self.updates_rejected_validation += 1,
                        RejectReason::Backpressure => self.updates_rejected_backpressure += 1,
                        RejectReason::Halted => self.updates_rejected_other += 1,
                    },
                }
            }
            TxnKind::Inference => match &outcome.status {
                TxnStatus::Committed { .. } => {
                    self.inference_served += 1;
                    self.latencies.push(outcome.latency_ns);
                }
                TxnStatus::Rejected { .. } => self.inference_rejected += 1,
            },
        }
    }

    /// Kill the engine the unclean way; outstanding work is abandoned.
    fn abandon(self) {
        self.engine.crash();
    }

    fn finish(
        mut self,
        events_offered: u64,
        ingest: IngestCounters,
        wall_ms: u64,
        opts: &RunOptions,
    ) -> Result<RunOutput> {
        let stats = self.engine.stats();
        let dump = engine_dump(&self.engine)?;

        let totality = self.pending.is_empty()
            && self.outcomes_seen == self.updates_submitted + self.inference_submitted
            && stats.submitted_updates == self.updates_submitted
            && stats.submitted_inference == self.inference_submitted
            && stats.committed_updates == self.updates_committed;
        let conserved = ingest.is_conserved() && ingest.in_flight() == 0;

        let mut report = MetricsReport {
            scenario: opts.scenario,
            arrival: opts.arrival,
            executors: opts.engine.executors,
            events_offered,
            ingest,
            updates_submitted: self.updates_submitted,
            updates_committed: self.updates_committed,
            updates_rejected_validation: self.updates_rejected_validation,
            updates_rejected_backpressure: self.updates_rejected_backpressure,
            updates_rejected_other: self.updates_rejected_other,
            inference_submitted: self.inference_submitted,
            inference_served: self.inference_served,
            inference_rejected: self.inference_rejected,
            examples_skipped: self.examples_skipped,
            predictions: self.predictions,
            epochs_committed: 0,
            watermark: 0,
            wal_len: 0,
            wall_ms: 0,
            throughput_txn_s: 0.0,
            latency: LatencySummary::from_samples(&mut self.latencies),
            staleness: self.staleness.clone(),
            executor_busy: Vec::new(),
            recovery_ms: None,
            recovered_epoch: None,
            reconciled: totality && conserved,
        };
        engine_section(&mut report, &stats, wall_ms);
        self.engine.shutdown()?;
        Ok(RunOutput { report, dump })
    }
}
