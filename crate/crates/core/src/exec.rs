//! Epoch execution: parallel chain folds with a serial fallback.
//!
//! Fast path: each executor folds its chains independently against base
//! values read at `epoch - 1`. Chains touch disjoint keys, so if every op
//! succeeds the folded results equal the serial schedule by construction.
//!
//! Slow path: if any op fails (dimension conflict, non-finite result), the
//! whole-transaction atomicity rule kicks in and per-chain results are no
//! longer independent: rejecting a transaction removes its ops from every
//! chain it touched. The coordinator then re-evaluates the epoch serially in
//! `(ts, txn_id)` order with per-transaction shadow validation, which is the
//! reference semantics. Failure epochs are rare, so paying a serial pass for
//! them keeps the common case untouched.
//!
//! Executors are long-lived threads fed per epoch with two barriers: one
//! after folding (the coordinator needs a global failure verdict before
//! anything is installed) and one after installing (visibility must not
//! advance until every version is in place).

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};

use crate::error::{Error, Result};
use crate::store::{ShardKey, ShardValue, StateStore};
use crate::txn::{EpochPlan, StateOp};

/// Apply one op to the running value of its key. `cur = None` means the key
/// does not exist yet at this point in the fold.
///
/// Failure messages name the reason only; the caller attaches txn context.
pub(crate) fn apply_op(cur: &mut Option<ShardValue>, op: &StateOp) -> std::result::Result<(), String> {
    match op {
        StateOp::Read { .. } => Err("read op in an update chain".into()),
        StateOp::Write { value, .. } => {
            if let (Some(ShardValue::Params(have)), ShardValue::Params(new)) = (&cur, value) {
                if have.len() != new.len() {
                    return Err(format!("write changes dim {} -> {}", have.len(), new.len()));
                }
            }
            *cur = Some(value.clone());
            Ok(())
        }
        StateOp::Apply { delta, .. } => match cur {
            None => {
                // First touch creates the key; the delta applies to zero.
                *cur = Some(ShardValue::Params(delta.clone()));
                Ok(())
            }
            Some(ShardValue::Params(v)) => {
                if v.len() != delta.len() {
                    return Err(format!("delta dim {} against value dim {}", delta.len(), v.len()));
                }
                let mut ok = true;
                for (x, d) in v.iter_mut().zip(delta) {
                    *x += d;
                    ok &= x.is_finite();
                }
                if !ok {
                    let bad = v.iter().find(|x| !x.is_finite()).unwrap();
                    return Err(format!("apply produced non-finite {bad}"));
                }
                Ok(())
            }
            Some(ShardValue::Meta(_)) => Err("delta applied to a meta value".into()),
        },
    }
}

/// Fold one chain against its base value. Stops at the first failing op:
/// one failure anywhere already forces the epoch onto the serial path, whose
/// results replace everything folded here. Soundness of committing on a
/// clean fold: until the serial schedule hits its first rejection, its
/// per-key state equals the chain-fold prefix state, so if the serial
/// schedule would reject anything, the earliest failing op fails here too.
fn fold_chain(
    plan: &EpochPlan,
    chain_idx: usize,
    base: Option<Arc<ShardValue>>,
) -> std::result::Result<ShardValue, (u32, String)> {
    let chain = &plan.chains[chain_idx];
    let mut cur: Option<ShardValue> = base.map(|v| (*v).clone());
    for cop in &chain.ops {
        if let Err(msg) = apply_op(&mut cur, plan.op(*cop)) {
            return Err((cop.txn_idx, msg));
        }
    }
    Ok(cur.expect("non-empty chain always yields a value"))
}

/// Serial re-evaluation of a whole epoch with per-transaction shadow
/// validation: a transaction's ops land in a scratch overlay first and merge
/// only if all of them succeed, so a rejected transaction leaves no trace.
/// Returns the rejection set and the final value per touched key.
pub(crate) fn shadow_execute(
    plan: &EpochPlan,
    base: impl Fn(&ShardKey) -> Option<Arc<ShardValue>>,
) -> (HashMap<u32, String>, BTreeMap<ShardKey, ShardValue>) {
    let mut state: BTreeMap<ShardKey, Option<ShardValue>> = BTreeMap::new();
    let mut rejected: HashMap<u32, String> = HashMap::new();
    for (txn_idx, at) in plan.txns.iter().enumerate() {
        let mut overlay: BTreeMap<ShardKey, Option<ShardValue>> = BTreeMap::new();
        let mut failure: Option<String> = None;
        for op in &at.txn.ops {
            let key = op.key();
            let mut cur = match overlay.get(key) {
                Some(v) => v.clone(),
                None => match state.get(key) {
                    Some(v) => v.clone(),
                    None => base(key).map(|v| (*v).clone()),
                },
            };
            if let Err(msg) = apply_op(&mut cur, op) {
                failure = Some(msg);
                break;
            }
            overlay.insert(key.clone(), cur);
        }
        match failure {
            Some(msg) => {
                rejected.insert(txn_idx as u32, msg);
            }
            None => state.extend(overlay),
        }
    }
    let values = state.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect();
    (rejected, values)
}

pub(crate) enum WorkerMsg {
    /// Fold the chains assigned to this executor and report results.
    Execute { plan: Arc<EpochPlan> },
    /// Install the given per-chain values (indexed by chain position) for
    /// chains assigned to this executor.
    Install { plan: Arc<EpochPlan>, values: Arc<Vec<Option<ShardValue>>> },
    Shutdown,
}

pub(crate) struct ExecuteReply {
    /// (chain index, folded value) for chains that folded cleanly.
    pub values: Vec<(usize, ShardValue)>,
    /// (txn index, reason), first failure per failing chain.
    pub failures: Vec<(u32, String)>,
}

pub(crate) struct InstallReply {
    pub result: Result<()>,
}

pub(crate) enum WorkerReply {
    Executed(ExecuteReply),
    Installed(InstallReply),
}

pub(crate) struct ExecutorPool {
    senders: Vec<Sender<WorkerMsg>>,
    reply_rx: Receiver<WorkerReply>,
    handles: Vec<std::thread::JoinHandle<()>>,
    /// Cumulative busy nanoseconds per executor, for utilization reporting.
    busy_ns: Vec<Arc<AtomicU64>>,
}

impl ExecutorPool {
    pub fn spawn(store: Arc<StateStore>, executors: u32) -> ExecutorPool {
        let executors = executors.max(1);
        let (reply_tx, reply_rx) = unbounded::<WorkerReply>();
        let mut senders = Vec::with_capacity(executors as usize);
        let mut handles = Vec::with_capacity(executors as usize);
        let mut busy_ns = Vec::with_capacity(executors as usize);
        for worker in 0..executors {
            let (tx, rx) = bounded::<WorkerMsg>(2);
            let reply_tx = reply_tx.clone();
            let store = Arc::clone(&store);
            let busy = Arc::new(AtomicU64::new(0));
            let busy_clone = Arc::clone(&busy);
            let handle = std::thread::Builder::new()
                .name(format!("tstream-exec-{worker}"))
                .spawn(move || worker_loop(worker, store, rx, reply_tx, busy_clone))
                .expect("spawn executor");
            senders.push(tx);
            handles.push(handle);
            busy_ns.push(busy);
        }
        ExecutorPool { senders, reply_rx, handles, busy_ns }
    }

    pub fn executors(&self) -> u32 {
        self.senders.len() as u32
    }

    pub fn busy_ns(&self) -> Vec<u64> {
        self.busy_ns.iter().map(|b| b.load(Ordering::Relaxed)).collect()
    }

    /// Phase 1: fold everything, gather a global verdict.
    pub fn execute(&self, plan: &Arc<EpochPlan>) -> (Vec<Option<ShardValue>>, Vec<(u32, String)>) {
        for tx in &self.senders {
            tx.send(WorkerMsg::Execute { plan: Arc::clone(plan) }).expect("executor alive");
        }
        let mut values: Vec<Option<ShardValue>> = (0..plan.chains.len()).map(|_| None).collect();
        let mut failures = Vec::new();
        for _ in 0..self.senders.len() {
            match self.reply_rx.recv().expect("executor alive") {
                WorkerReply::Executed(r) => {
                    for (idx, v) in r.values {
                        values[idx] = Some(v);
                    }
                    failures.extend(r.failures);
                }
                WorkerReply::Installed(_) => unreachable!("install reply during execute phase"),
            }
        }
        (values, failures)
    }

    /// Phase 2: install per-chain final values. Returns once every executor
    /// has finished, so the caller may advance the watermark afterwards.
    pub fn install(&self, plan: &Arc<EpochPlan>, values: Vec<Option<ShardValue>>) -> Result<()> {
        let values = Arc::new(values);
        for tx in &self.senders {
            tx.send(WorkerMsg::Install { plan: Arc::clone(plan), values: Arc::clone(&values) })
                .expect("executor alive");
        }
        let mut result = Ok(());
        for _ in 0..self.senders.len() {
            match self.reply_rx.recv().expect("executor alive") {
                WorkerReply::Installed(r) => {
                    if r.result.is_err() && result.is_ok() {
                        result = r.result;
                    }
                }
                WorkerReply::Executed(_) => unreachable!("execute reply during install phase"),
            }
        }
        result
    }

    pub fn shutdown(self) {
        for tx in &self.senders {
            let _ = tx.send(WorkerMsg::Shutdown);
        }
        for h in self.handles {
            let _ = h.join();
        }
    }
}

fn worker_loop(
    worker_id: u32,
    store: Arc<StateStore>,
    rx: Receiver<WorkerMsg>,
    reply_tx: Sender<WorkerReply>,
    busy_ns: Arc<AtomicU64>,
) {
    while let Ok(msg) = rx.recv() {
        match msg {
            WorkerMsg::Execute { plan } => {
                let t0 = Instant::now();
                let base_epoch = plan.epoch_id - 1;
                let mut values = Vec::new();
                let mut failures = Vec::new();
                for (idx, chain) in plan.chains.iter().enumerate() {
                    if chain.executor != worker_id {
                        continue;
                    }
                    let base = store.get_visible(&chain.key, base_epoch);
                    match fold_chain(&plan, idx, base) {
                        Ok(v) => values.push((idx, v)),
                        Err(f) => failures.push(f),
                    }
                }
                busy_ns.fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
                if reply_tx.send(WorkerReply::Executed(ExecuteReply { values, failures })).is_err() {
                    return;
                }
            }
            WorkerMsg::Install { plan, values } => {
                let t0 = Instant::now();
                let mut result: Result<()> = Ok(());
                for (idx, chain) in plan.chains.iter().enumerate() {
                    if chain.executor != worker_id {
                        continue;
                    }
                    if let Some(value) = &values[idx] {
                        if let Err(e) = store.install_version(&chain.key, value.clone(), plan.epoch_id) {
                            result = Err(e);
                            break;
                        }
                    }
                }
                busy_ns.fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
                if reply_tx.send(WorkerReply::Installed(InstallReply { result })).is_err() {
                    return;
                }
            }
            WorkerMsg::Shutdown => return,
        }
    }
}

/// Serial, pool-free execution of a committed-only plan. Recovery replays
/// log records through this; failures are impossible for records the engine
/// itself wrote, so any failure is corruption.
pub(crate) fn replay_plan(store: &StateStore, plan: &EpochPlan) -> Result<()> {
    for (idx, chain) in plan.chains.iter().enumerate() {
        let base = store.get_visible(&chain.key, plan.epoch_id - 1);
        match fold_chain(plan, idx, base) {
            Ok(value) => store.install_version(&chain.key, value, plan.epoch_id)?,
            Err((txn_idx, msg)) => {
                return Err(Error::Corrupt(format!(
                    "logged epoch {} fails to replay (txn index {txn_idx}: {msg})",
                    plan.epoch_id
                )));
            }
        }
    }
    store.advance_watermark(plan.epoch_id)
}

/// Rejection set alignment helper: shadow results are keyed by `ShardKey`,
/// plan chains are key-sorted, so the two zip 1:1.
pub(crate) fn align_shadow_values(
    plan: &EpochPlan,
    mut values: BTreeMap<ShardKey, ShardValue>,
) -> Vec<Option<ShardValue>> {
    plan.chains.iter().map(|c| values.remove(&c.key)).collect()
}
