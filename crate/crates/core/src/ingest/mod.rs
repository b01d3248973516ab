//! Event ingestion: per-source pipelines that turn raw streams into work
//! items.
//!
//! ```text
//!   sources --ingest()--> entry checks (kind, finiteness, ts order)
//!                            |
//!                            v            per source, serial
//!                 Filter -> Transform -> Aggregate -> ...
//!                            |
//!                            v
//!                 bounded queue --recv()--> consumer
//! ```
//!
//! Every ingested event ends up in exactly one bucket: taken by the consumer
//! inside a work item (`emitted_events`), dropped with a counted reason, or
//! in flight (open window or queued item). `IngestCounters::is_conserved`
//! checks that equation and the harness asserts it after every run.
//!
//! Aggregation is what makes the accounting non-obvious: a tumbling window
//! absorbs its events and emits one output, so a single work item can stand
//! for many events. Items therefore carry their absorbed event count and
//! all counters are denominated in events, not items.
//!
//! Backpressure policy: the output queue is bounded, and a send that cannot
//! complete within the configured timeout drops the item (all of its
//! events) with reason `backpressure`. Sources stall for at most the
//! timeout, never indefinitely.
//!
//! Order: stages for one source run serially under that source's lock, so
//! per-source order is preserved end to end. Nothing orders distinct
//! sources relative to each other; that is the admission clock's job.

pub mod trace;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum EventBody {
    Observation { features: Vec<(String, f64)>, label: Option<f64> },
    Query { features: Vec<(String, f64)> },
    Raw { payload: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamEvent {
    pub source: String,
    /// Logical event time, non-decreasing per source.
    pub ts: u64,
    pub body: EventBody,
}

impl StreamEvent {
    pub fn observation(source: &str, ts: u64, features: Vec<(String, f64)>, label: Option<f64>) -> Self {
        StreamEvent { source: source.into(), ts, body: EventBody::Observation { features, label } }
    }

    pub fn query(source: &str, ts: u64, features: Vec<(String, f64)>) -> Self {
        StreamEvent { source: source.into(), ts, body: EventBody::Query { features } }
    }

    pub fn raw(source: &str, ts: u64, payload: Vec<u8>) -> Self {
        StreamEvent { source: source.into(), ts, body: EventBody::Raw { payload } }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    fn eval(self, lhs: f64, rhs: f64) -> bool {
        match self {
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
        }
    }
}

/// One conjunct of a filter stage. A `Compare` on an absent field fails the
/// clause; use `Has` when presence itself is the question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Clause {
    Has { field: String },
    Compare { field: String, op: CmpOp, value: f64 },
}

impl Clause {
    fn admits(&self, features: &[(String, f64)]) -> bool {
        match self {
            Clause::Has { field } => features.iter().any(|(n, _)| n == field),
            Clause::Compare { field, op, value } => features
                .iter()
                .find(|(n, _)| n == field)
                .is_some_and(|(_, v)| op.eval(*v, *value)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MapOp {
    Rename { from: String, to: String },
    Scale { field: String, factor: f64 },
    Offset { field: String, amount: f64 },
    DropField { field: String },
}

impl MapOp {
    /// Missing fields are a no-op; transforms shape data, filters judge it.
    fn apply(&self, features: &mut Vec<(String, f64)>) {
        match self {
            MapOp::Rename { from, to } => {
                for (n, _) in features.iter_mut() {
                    if n == from {
                        *n = to.clone();
                    }
                }
            }
            MapOp::Scale { field, factor } => {
                for (n, v) in features.iter_mut() {
                    if n == field {
                        *v *= factor;
                    }
                }
            }
            MapOp::Offset { field, amount } => {
                for (n, v) in features.iter_mut() {
                    if n == field {
                        *v += amount;
                    }
                }
            }
            MapOp::DropField { field } => features.retain(|(n, _)| n != field),
        }
    }

    fn constant(&self) -> Option<f64> {
        match self {
            MapOp::Scale { factor, .. } => Some(*factor),
            MapOp::Offset { amount, .. } => Some(*amount),
            _ => None,
        }
    }
}

/// Tumbling window extent: a fixed number of events, or a fixed span of
/// event time aligned to multiples of the span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    Events(u64),
    Time(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reducer {
    Sum,
    Mean,
    Count,
    Last,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Stage {
    Filter { all: Vec<Clause> },
    Transform { ops: Vec<MapOp> },
    Aggregate { window: Window, reducer: Reducer },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub stages: Vec<Stage>,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        let mut aggregates = 0;
        for stage in &self.stages {
            match stage {
                Stage::Filter { all } => {
                    for c in all {
                        let (field, constant) = match c {
                            Clause::Has { field } => (field, None),
                            Clause::Compare { field, value, .. } => (field, Some(*value)),
                        };
                        if field.is_empty() {
                            return Err(Error::invalid("filter clause has empty field name"));
                        }
                        if constant.is_some_and(|v| !v.is_finite()) {
                            return Err(Error::invalid(format!("filter on {field:?} compares to non-finite value")));
                        }
                    }
                }
                Stage::Transform { ops } => {
                    for op in ops {
                        if op.constant().is_some_and(|v| !v.is_finite()) {
                            return Err(Error::invalid("transform uses a non-finite constant"));
                        }
                    }
                }
                Stage::Aggregate { window, .. } => {
                    aggregates += 1;
                    if aggregates > 1 {
                        return Err(Error::invalid("pipeline has more than one aggregate stage"));
                    }
                    let w = match window {
                        Window::Events(w) | Window::Time(w) => *w,
                    };
                    if w == 0 {
                        return Err(Error::invalid("window size must be >= 1"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Filtered,
    Malformed,
    Backpressure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestAck {
    Accepted,
    Dropped(DropReason),
}

/// What the pipeline hands to the consumer. `events` is how many source
/// events the item absorbed; the accounting equation runs on that number.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkItem {
    TrainExample {
        source: String,
        features: Vec<(String, f64)>,
        label: Option<f64>,
        origin_ts: u64,
        events: u64,
    },
    InferenceRequest {
        source: String,
        features: Vec<(String, f64)>,
        reply: u64,
        origin_ts: u64,
    },
}

impl WorkItem {
    pub fn events(&self) -> u64 {
        match self {
            WorkItem::TrainExample { events, .. } => *events,
            WorkItem::InferenceRequest { .. } => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestConfig {
    pub queue_capacity: usize,
    pub enqueue_timeout: Duration,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { queue_capacity: 4096, enqueue_timeout: Duration::from_millis(100) }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestCounters {
    pub ingested: u64,
    pub emitted_items: u64,
    /// Events the consumer has taken, through the items that absorbed them.
    pub emitted_events: u64,
    pub dropped_filtered: u64,
    pub dropped_malformed: u64,
    pub dropped_backpressure: u64,
    /// Events that arrived with a decreasing per-source ts. Diagnostic;
    /// these are already included in `dropped_filtered`.
    pub ts_order_violations: u64,
    /// Events absorbed in still-open windows.
    pub window_pending_events: u64,
    /// Events inside items sitting in the queue.
    pub queued_events: u64,
}

impl IngestCounters {
    pub fn in_flight(&self) -> u64 {
        self.window_pending_events + self.queued_events
    }

    pub fn dropped(&self) -> u64 {
        self.dropped_filtered + self.dropped_malformed + self.dropped_backpressure
    }

    /// The bucket partition, checked exactly. Holds at every quiescent
    /// point (no ingest call in progress).
    pub fn is_conserved(&self) -> bool {
        self.ingested == self.emitted_events + self.dropped() + self.in_flight()
    }
}

#[derive(Default)]
struct CounterCells {
    ingested: AtomicU64,
    emitted_items: AtomicU64,
    emitted_events: AtomicU64,
    dropped_filtered: AtomicU64,
    dropped_malformed: AtomicU64,
    dropped_backpressure: AtomicU64,
    ts_order_violations: AtomicU64,
    window_pending: AtomicU64,
    queued_events: AtomicU64,
}

impl CounterCells {
    fn snapshot(&self) -> IngestCounters {
        IngestCounters {
            ingested: self.ingested.load(Ordering::Relaxed),
            emitted_items: self.emitted_items.load(Ordering::Relaxed),
            emitted_events: self.emitted_events.load(Ordering::Relaxed),
            dropped_filtered: self.dropped_filtered.load(Ordering::Relaxed),
            dropped_malformed: self.dropped_malformed.load(Ordering::Relaxed),
            dropped_backpressure: self.dropped_backpressure.load(Ordering::Relaxed),
            ts_order_violations: self.ts_order_violations.load(Ordering::Relaxed),
            window_pending_events: self.window_pending.load(Ordering::Relaxed),
            queued_events: self.queued_events.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Default)]
struct FeatAcc {
    sum: f64,
    count: u64,
    last: f64,
}

#[derive(Debug, Default)]
struct OpenWindow {
    feats: BTreeMap<String, FeatAcc>,
    label: Option<f64>,
    events: u64,
    last_ts: u64,
    /// Exclusive end of a time window; unused for event-count windows.
    end: u64,
}

impl OpenWindow {
    fn for_time(ts: u64, span: u64) -> OpenWindow {
        OpenWindow { end: (ts / span).saturating_add(1).saturating_mul(span), ..OpenWindow::default() }
    }

    fn add(&mut self, view: &View) {
        for (name, v) in &view.features {
            let acc = self.feats.entry(name.clone()).or_default();
            acc.sum += v;
            acc.count += 1;
            acc.last = *v;
        }
        if view.label.is_some() {
            self.label = view.label;
        }
        self.events += view.events;
        self.last_ts = view.ts;
    }
}

/// The unit flowing through the stages: one event on entry, possibly a
/// whole closed window after the aggregate stage.
struct View {
    features: Vec<(String, f64)>,
    label: Option<f64>,
    ts: u64,
    events: u64,
    is_query: bool,
}

fn reduce(w: OpenWindow, reducer: Reducer) -> View {
    let features = w
        .feats
        .into_iter()
        .map(|(name, acc)| {
            let v = match reducer {
                Reducer::Sum => acc.sum,
                Reducer::Mean => acc.sum / acc.count as f64,
                Reducer::Count => acc.count as f64,
                Reducer::Last => acc.last,
            };
            (name, v)
        })
        .collect();
    View { features, label: w.label, ts: w.last_ts, events: w.events, is_query: false }
}

#[derive(Default)]
struct SourceState {
    last_ts: Option<u64>,
    window: Option<OpenWindow>,
}

enum Absorbed {
    /// Event joined the open window; nothing leaves the stage.
    Pending,
    /// Window closed with the event inside it.
    Closed(View),
    /// Window closed without the event; the event opened the next window.
    ClosedAndPending(View),
}

enum UnitOutcome {
    Pending,
    Dropped(DropReason, u64),
    Out(View),
}

pub struct Ingestor {
    pipeline: PipelineSpec,
    cfg: IngestConfig,
    /// (stage index, reducer) of the aggregate stage, if any.
    agg: Option<(usize, Reducer)>,
    sources: Mutex<HashMap<String, Arc<Mutex<SourceState>>>>,
    tx: Sender<WorkItem>,
    c: Arc<CounterCells>,
    next_reply: AtomicU64,
}

/// Consumer end of the queue. Taking an item moves its events from
/// `queued_events` to `emitted_events`.
pub struct WorkQueue {
    rx: Receiver<WorkItem>,
    c: Arc<CounterCells>,
}

impl Ingestor {
    pub fn new(pipeline: PipelineSpec, cfg: IngestConfig) -> Result<(Ingestor, WorkQueue)> {
        pipeline.validate()?;
        if cfg.queue_capacity == 0 {
            return Err(Error::invalid("queue capacity must be >= 1"));
        }
        let agg = pipeline.stages.iter().enumerate().find_map(|(i, s)| match s {
            Stage::Aggregate { reducer, .. } => Some((i, *reducer)),
            _ => None,
        });
        let (tx, rx) = bounded(cfg.queue_capacity);
        let c = Arc::new(CounterCells::default());
        let ing = Ingestor {
            pipeline,
            cfg,
            agg,
            sources: Mutex::new(HashMap::new()),
            tx,
            c: c.clone(),
            next_reply: AtomicU64::new(0),
        };
        Ok((ing, WorkQueue { rx, c }))
    }

    pub fn counters(&self) -> IngestCounters {
        self.c.snapshot()
    }

    pub fn ingest(&self, event: StreamEvent) -> IngestAck {
        self.c.ingested.fetch_add(1, Ordering::Relaxed);
        let (features, label, is_query) = match event.body {
            EventBody::Observation { features, label } => (features, label, false),
            EventBody::Query { features } => (features, None, true),
            EventBody::Raw { .. } => {
                // Declarative stages have nothing to say about opaque bytes.
                self.c.dropped_malformed.fetch_add(1, Ordering::Relaxed);
                return IngestAck::Dropped(DropReason::Malformed);
            }
        };
        if features.iter().any(|(_, v)| !v.is_finite()) || label.is_some_and(|l| !l.is_finite()) {
            self.c.dropped_malformed.fetch_add(1, Ordering::Relaxed);
            return IngestAck::Dropped(DropReason::Malformed);
        }

        let src = self.source(&event.source);
        let mut st = src.lock();
        if st.last_ts.is_some_and(|last| event.ts < last) {
            self.c.ts_order_violations.fetch_add(1, Ordering::Relaxed);
            self.c.dropped_filtered.fetch_add(1, Ordering::Relaxed);
            return IngestAck::Dropped(DropReason::Filtered);
        }
        st.last_ts = Some(event.ts);

        let view = View { features, label, ts: event.ts, events: 1, is_query };
        let (unit, event_pends) = self.run_stages(&mut st, view, 0);
        match unit {
            UnitOutcome::Pending => IngestAck::Accepted,
            UnitOutcome::Dropped(reason, n) => {
                self.count_drop(reason, n);
                if event_pends {
                    IngestAck::Accepted
                } else {
                    IngestAck::Dropped(reason)
                }
            }
            UnitOutcome::Out(v) => {
                let sent = self.push(self.item_from(&event.source, v));
                if sent || event_pends {
                    IngestAck::Accepted
                } else {
                    IngestAck::Dropped(DropReason::Backpressure)
                }
            }
        }
    }

    /// Close every open window and run the outputs through the rest of the
    /// pipeline, in source-name order. Call at end of stream; short traces
    /// would otherwise never see their tail.
    pub fn finish(&self) {
        let Some((agg_idx, reducer)) = self.agg else { return };
        let mut names: Vec<String> = self.sources.lock().keys().cloned().collect();
        names.sort();
        for name in names {
            let src = self.source(&name);
            let mut st = src.lock();
            let Some(w) = st.window.take() else { continue };
            self.c.window_pending.fetch_sub(w.events, Ordering::Relaxed);
            let (unit, _) = self.run_stages(&mut st, reduce(w, reducer), agg_idx + 1);
            match unit {
                UnitOutcome::Pending => unreachable!("only one aggregate stage"),
                UnitOutcome::Dropped(reason, n) => self.count_drop(reason, n),
                UnitOutcome::Out(v) => {
                    self.push(self.item_from(&name, v));
                }
            }
        }
    }

    fn source(&self, name: &str) -> Arc<Mutex<SourceState>> {
        self.sources.lock().entry(name.to_string()).or_default().clone()
    }

    fn run_stages(&self, st: &mut SourceState, mut view: View, start: usize) -> (UnitOutcome, bool) {
        let mut event_pends = false;
        for stage in &self.pipeline.stages[start..] {
            match stage {
                Stage::Filter { all } => {
                    if !all.iter().all(|c| c.admits(&view.features)) {
                        return (UnitOutcome::Dropped(DropReason::Filtered, view.events), event_pends);
                    }
                }
                Stage::Transform { ops } => {
                    for op in ops {
                        op.apply(&mut view.features);
                    }
                    if view.features.iter().any(|(_, v)| !v.is_finite()) {
                        return (UnitOutcome::Dropped(DropReason::Malformed, view.events), event_pends);
                    }
                }
                Stage::Aggregate { window, reducer } => {
                    if view.is_query {
                        continue; // queries are requests, not data to window
                    }
                    match self.absorb(st, *window, *reducer, view) {
                        Absorbed::Pending => return (UnitOutcome::Pending, true),
                        Absorbed::Closed(v) => view = v,
                        Absorbed::ClosedAndPending(v) => {
                            event_pends = true;
                            view = v;
                        }
                    }
                }
            }
        }
        (UnitOutcome::Out(view), event_pends)
    }

    fn absorb(&self, st: &mut SourceState, window: Window, reducer: Reducer, view: View) -> Absorbed {
        match window {
            Window::Events(w) => {
                let open = st.window.get_or_insert_with(OpenWindow::default);
                open.add(&view);
                self.c.window_pending.fetch_add(view.events, Ordering::Relaxed);
                let full = open.events >= w;
                if full {
                    let closed = st.window.take().expect("window just filled");
                    self.c.window_pending.fetch_sub(closed.events, Ordering::Relaxed);
                    Absorbed::Closed(reduce(closed, reducer))
                } else {
                    Absorbed::Pending
                }
            }
            Window::Time(span) => {
                let rotate = st.window.as_ref().is_some_and(|open| view.ts >= open.end);
                if rotate {
                    let closed = st.window.take().expect("window present");
                    self.c.window_pending.fetch_sub(closed.events, Ordering::Relaxed);
                    let mut fresh = OpenWindow::for_time(view.ts, span);
                    self.c.window_pending.fetch_add(view.events, Ordering::Relaxed);
                    fresh.add(&view);
                    st.window = Some(fresh);
                    Absorbed::ClosedAndPending(reduce(closed, reducer))
                } else {
                    let open = st
                        .window
                        .get_or_insert_with(|| OpenWindow::for_time(view.ts, span));
                    open.add(&view);
                    self.c.window_pending.fetch_add(view.events, Ordering::Relaxed);
                    Absorbed::Pending
                }
            }
        }
    }

    fn item_from(&self, source: &str, view: View) -> WorkItem {
        if view.is_query {
            WorkItem::InferenceRequest {
                source: source.to_string(),
                features: view.features,
                reply: self.next_reply.fetch_add(1, Ordering::Relaxed),
                origin_ts: view.ts,
            }
        } else {
            WorkItem::TrainExample {
                source: source.to_string(),
                features: view.features,
                label: view.label,
                origin_ts: view.ts,
                events: view.events,
            }
        }
    }

    fn push(&self, item: WorkItem) -> bool {
        let n = item.events();
        // Count before sending so the consumer can never observe an
        // uncounted queued item.
        self.c.queued_events.fetch_add(n, Ordering::Relaxed);
        match self.tx.send_timeout(item, self.cfg.enqueue_timeout) {
            Ok(()) => true,
            Err(_) => {
                self.c.queued_events.fetch_sub(n, Ordering::Relaxed);
                self.c.dropped_backpressure.fetch_add(n, Ordering::Relaxed);
                false
            }
        }
    }

    fn count_drop(&self, reason: DropReason, n: u64) {
        let cell = match reason {
            DropReason::Filtered => &self.c.dropped_filtered,
            DropReason::Malformed => &self.c.dropped_malformed,
            DropReason::Backpressure => &self.c.dropped_backpressure,
        };
        cell.fetch_add(n, Ordering::Relaxed);
    }
}

impl WorkQueue {
    pub fn try_recv(&self) -> Option<WorkItem> {
        self.rx.try_recv().ok().map(|i| self.took(i))
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<WorkItem> {
        self.rx.recv_timeout(timeout).ok().map(|i| self.took(i))
    }

    pub fn drain(&self) -> Vec<WorkItem> {
        let mut out = Vec::new();
        while let Some(item) = self.try_recv() {
            out.push(item);
        }
        out
    }

    pub fn counters(&self) -> IngestCounters {
        self.c.snapshot()
    }

    fn took(&self, item: WorkItem) -> WorkItem {
        let n = item.events();
        self.c.queued_events.fetch_sub(n, Ordering::Relaxed);
        self.c.emitted_events.fetch_add(n, Ordering::Relaxed);
        self.c.emitted_items.fetch_add(1, Ordering::Relaxed);
        item
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(src: &str, ts: u64, feats: &[(&str, f64)], label: Option<f64>) -> StreamEvent {
        StreamEvent::observation(src, ts, feats.iter().map(|(n, v)| (n.to_string(), *v)).collect(), label)
    }

    fn pipeline(stages: Vec<Stage>) -> (Ingestor, WorkQueue) {
        Ingestor::new(PipelineSpec { stages }, IngestConfig::default()).unwrap()
    }

    #[test]
    fn identity_pipeline_emits_one_item_per_observation() {
        let (ing, q) = pipeline(vec![]);
        let ack = ing.ingest(obs("s", 1, &[("x", 2.0)], Some(1.0)));
        assert_eq!(ack, IngestAck::Accepted);
        match q.try_recv().unwrap() {
            WorkItem::TrainExample { source, features, label, origin_ts, events } => {
                assert_eq!(source, "s");
                assert_eq!(features, vec![("x".to_string(), 2.0)]);
                assert_eq!(label, Some(1.0));
                assert_eq!(origin_ts, 1);
                assert_eq!(events, 1);
            }
            other => panic!("unexpected item {other:?}"),
        }
        let c = q.counters();
        assert_eq!((c.ingested, c.emitted_events, c.emitted_items), (1, 1, 1));
        assert!(c.is_conserved());
    }

    #[test]
    fn malformed_inputs_are_counted() {
        let (ing, q) = pipeline(vec![]);
        assert_eq!(
            ing.ingest(obs("s", 1, &[("x", f64::NAN)], None)),
            IngestAck::Dropped(DropReason::Malformed)
        );
        assert_eq!(
            ing.ingest(obs("s", 2, &[("x", 1.0)], Some(f64::INFINITY))),
            IngestAck::Dropped(DropReason::Malformed)
        );
        assert_eq!(
            ing.ingest(StreamEvent::raw("s", 3, vec![1, 2, 3])),
            IngestAck::Dropped(DropReason::Malformed)
        );
        let c = q.counters();
        assert_eq!(c.dropped_malformed, 3);
        assert!(c.is_conserved());
    }

    #[test]
    fn decreasing_ts_is_dropped_and_flagged() {
        let (ing, q) = pipeline(vec![]);
        assert_eq!(ing.ingest(obs("s", 5, &[("x", 1.0)], None)), IngestAck::Accepted);
        assert_eq!(ing.ingest(obs("s", 5, &[("x", 1.0)], None)), IngestAck::Accepted); // equal is fine
        assert_eq!(
            ing.ingest(obs("s", 3, &[("x", 1.0)], None)),
            IngestAck::Dropped(DropReason::Filtered)
        );
        // Other sources have their own clock.
        assert_eq!(ing.ingest(obs("t", 1, &[("x", 1.0)], None)), IngestAck::Accepted);
        let c = q.counters();
        assert_eq!(c.ts_order_violations, 1);
        assert_eq!(c.dropped_filtered, 1);
        q.drain();
        assert!(q.counters().is_conserved());
    }

    #[test]
    fn filter_clauses_are_a_conjunction() {
        let (ing, q) = pipeline(vec![Stage::Filter {
            all: vec![
                Clause::Compare { field: "temp".into(), op: CmpOp::Gt, value: 0.5 },
                Clause::Has { field: "hum".into() },
            ],
        }]);
        assert_eq!(
            ing.ingest(obs("s", 1, &[("temp", 0.4), ("hum", 1.0)], None)),
            IngestAck::Dropped(DropReason::Filtered)
        );
        assert_eq!(
            ing.ingest(obs("s", 2, &[("temp", 0.9)], None)),
            IngestAck::Dropped(DropReason::Filtered)
        );
        // Compare on a missing field fails the clause.
        assert_eq!(
            ing.ingest(obs("s", 3, &[("hum", 1.0)], None)),
            IngestAck::Dropped(DropReason::Filtered)
        );
        assert_eq!(ing.ingest(obs("s", 4, &[("temp", 0.9), ("hum", 1.0)], None)), IngestAck::Accepted);
        assert_eq!(q.drain().len(), 1);
        assert!(q.counters().is_conserved());
    }

    #[test]
    fn transforms_apply_in_order() {
        let (ing, q) = pipeline(vec![Stage::Transform {
            ops: vec![
                MapOp::Rename { from: "raw_temp".into(), to: "temp".into() },
                MapOp::Scale { field: "temp".into(), factor: 0.5 },
                MapOp::Offset { field: "temp".into(), amount: 1.0 },
                MapOp::DropField { field: "junk".into() },
            ],
        }]);
        ing.ingest(obs("s", 1, &[("raw_temp", 4.0), ("junk", 9.0)], None));
        match q.try_recv().unwrap() {
            WorkItem::TrainExample { features, .. } => {
                assert_eq!(features, vec![("temp".to_string(), 3.0)]);
            }
            other => panic!("unexpected item {other:?}"),
        }
    }

    #[test]
    fn transform_overflow_is_malformed() {
        let (ing, q) = pipeline(vec![Stage::Transform {
            ops: vec![MapOp::Scale { field: "x".into(), factor: 1e308 }],
        }]);
        assert_eq!(
            ing.ingest(obs("s", 1, &[("x", 10.0)], None)),
            IngestAck::Dropped(DropReason::Malformed)
        );
        assert_eq!(q.counters().dropped_malformed, 1);
    }

    #[test]
    fn count_windows_partition_the_stream() {
        let (ing, q) = pipeline(vec![Stage::Aggregate {
            window: Window::Events(5),
            reducer: Reducer::Sum,
        }]);
        for i in 0..10 {
            assert_eq!(ing.ingest(obs("s", i, &[("v", 1.0)], None)), IngestAck::Accepted);
        }
        let items = q.drain();
        assert_eq!(items.len(), 2);
        for item in &items {
            match item {
                WorkItem::TrainExample { features, events, .. } => {
                    assert_eq!(features, &vec![("v".to_string(), 5.0)]);
                    assert_eq!(*events, 5);
                }
                other => panic!("unexpected item {other:?}"),
            }
        }
        let c = q.counters();
        assert_eq!((c.emitted_events, c.emitted_items), (10, 2));
        assert!(c.is_conserved());
    }

    #[test]
    fn partial_window_pends_until_finish() {
        let (ing, q) = pipeline(vec![Stage::Aggregate {
            window: Window::Events(3),
            reducer: Reducer::Sum,
        }]);
        for i in 0..4 {
            ing.ingest(obs("s", i, &[("v", 1.0)], None));
        }
        assert_eq!(q.drain().len(), 1);
        let c = q.counters();
        assert_eq!(c.window_pending_events, 1);
        assert!(c.is_conserved());
        ing.finish();
        let tail = q.drain();
        assert_eq!(tail.len(), 1);
        assert_eq!(tail[0].events(), 1);
        let c = q.counters();
        assert_eq!(c.window_pending_events, 0);
        assert_eq!(c.emitted_events, 4);
        assert!(c.is_conserved());
    }

    #[test]
    fn reducers_compute_per_feature_name() {
        for (reducer, a, b) in [
            (Reducer::Sum, 6.0, 4.0),
            (Reducer::Mean, 2.0, 4.0),
            (Reducer::Count, 3.0, 1.0),
            (Reducer::Last, 3.0, 4.0),
        ] {
            let (ing, q) = pipeline(vec![Stage::Aggregate {
                window: Window::Events(3),
                reducer,
            }]);
            ing.ingest(obs("s", 1, &[("a", 1.0)], None));
            ing.ingest(obs("s", 2, &[("a", 2.0), ("b", 4.0)], None));
            ing.ingest(obs("s", 3, &[("a", 3.0)], Some(1.0)));
            match q.try_recv().unwrap() {
                WorkItem::TrainExample { features, label, origin_ts, events, .. } => {
                    // BTreeMap order: a before b.
                    assert_eq!(features, vec![("a".to_string(), a), ("b".to_string(), b)], "{reducer:?}");
                    assert_eq!(label, Some(1.0));
                    assert_eq!(origin_ts, 3);
                    assert_eq!(events, 3);
                }
                other => panic!("unexpected item {other:?}"),
            }
        }
    }

    #[test]
    fn time_windows_align_to_the_grid() {
        let (ing, q) = pipeline(vec![Stage::Aggregate {
            window: Window::Time(10),
            reducer: Reducer::Sum,
        }]);
        for ts in [3, 7, 12, 35] {
            assert_eq!(ing.ingest(obs("s", ts, &[("v", 1.0)], None)), IngestAck::Accepted);
        }
        let items = q.drain();
        // [0,10) closed by ts 12 with two events; [10,20) closed by ts 35
        // with one; ts 35 pends in [30,40).
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].events(), 2);
        assert_eq!(items[1].events(), 1);
        let c = q.counters();
        assert_eq!(c.window_pending_events, 1);
        assert!(c.is_conserved());
    }

    #[test]
    fn queries_bypass_windows_and_get_reply_ids() {
        let (ing, q) = pipeline(vec![Stage::Aggregate {
            window: Window::Events(100),
            reducer: Reducer::Sum,
        }]);
        ing.ingest(obs("s", 1, &[("v", 1.0)], None));
        ing.ingest(StreamEvent::query("s", 2, vec![("v".to_string(), 0.0)]));
        ing.ingest(StreamEvent::query("s", 3, vec![("v".to_string(), 0.0)]));
        let items = q.drain();
        assert_eq!(items.len(), 2);
        match (&items[0], &items[1]) {
            (
                WorkItem::InferenceRequest { reply: r0, .. },
                WorkItem::InferenceRequest { reply: r1, .. },
            ) => {
                assert_eq!((*r0, *r1), (0, 1));
            }
            other => panic!("unexpected items {other:?}"),
        }
        assert_eq!(q.counters().window_pending_events, 1);
        assert!(q.counters().is_conserved());
    }

    #[test]
    fn full_queue_drops_with_backpressure() {
        let cfg = IngestConfig { queue_capacity: 1, enqueue_timeout: Duration::from_millis(1) };
        let (ing, q) = Ingestor::new(PipelineSpec::default(), cfg).unwrap();
        assert_eq!(ing.ingest(obs("s", 1, &[("x", 1.0)], None)), IngestAck::Accepted);
        assert_eq!(
            ing.ingest(obs("s", 2, &[("x", 1.0)], None)),
            IngestAck::Dropped(DropReason::Backpressure)
        );
        assert_eq!(q.drain().len(), 1);
        let c = q.counters();
        assert_eq!(c.dropped_backpressure, 1);
        assert!(c.is_conserved());
    }

    #[test]
    fn replay_is_deterministic() {
        let stages = vec![
            Stage::Filter { all: vec![Clause::Compare { field: "v".into(), op: CmpOp::Ge, value: 0.0 }] },
            Stage::Transform { ops: vec![MapOp::Scale { field: "v".into(), factor: 2.0 }] },
            Stage::Aggregate { window: Window::Events(2), reducer: Reducer::Mean },
        ];
        let events: Vec<StreamEvent> = (0..20)
            .map(|i| obs("s", i, &[("v", (i as f64) - 3.0)], Some((i % 2) as f64)))
            .collect();
        let run = |events: &[StreamEvent]| {
            let (ing, q) = pipeline(stages.clone());
            for e in events {
                ing.ingest(e.clone());
            }
            ing.finish();
            q.drain()
        };
        assert_eq!(run(&events), run(&events));
    }

    #[test]
    fn validation_rejects_bad_pipelines() {
        let agg = Stage::Aggregate { window: Window::Events(1), reducer: Reducer::Sum };
        assert!(PipelineSpec { stages: vec![agg.clone(), agg.clone()] }.validate().is_err());
        assert!(PipelineSpec {
            stages: vec![Stage::Aggregate { window: Window::Events(0), reducer: Reducer::Sum }]
        }
        .validate()
        .is_err());
        assert!(PipelineSpec {
            stages: vec![Stage::Transform { ops: vec![MapOp::Scale { field: "x".into(), factor: f64::NAN }] }]
        }
        .validate()
        .is_err());
    }

    proptest! {
        /// Sum-reduced tumbling windows conserve the total: whatever reached
        /// the aggregate stage comes out of it, split across window outputs.
        /// Integer-valued floats keep the sums exact.
        #[test]
        fn window_outputs_conserve_the_sum(
            values in proptest::collection::vec(-50i64..50, 1..200),
            w in 1u64..8,
        ) {
            let (ing, q) = pipeline(vec![Stage::Aggregate {
                window: Window::Events(w),
                reducer: Reducer::Sum,
            }]);
            for (i, v) in values.iter().enumerate() {
                ing.ingest(obs("s", i as u64, &[("v", *v as f64)], None));
            }
            ing.finish();
            let items = q.drain();
            let total: f64 = items
                .iter()
                .map(|i| match i {
                    WorkItem::TrainExample { features, .. } => features[0].1,
                    _ => 0.0,
                })
                .sum();
            let want: f64 = values.iter().map(|v| *v as f64).sum();
            prop_assert_eq!(total, want);
            let c = q.counters();
            prop_assert_eq!(c.emitted_events, values.len() as u64);
            prop_assert!(c.is_conserved());
        }
    }
}
