//! Transactions and epoch plans.
//!
//! A transaction is a small ordered list of state operations, either an
//! `Update` (writes and deltas, no result payload) or an `Inference` (reads
//! only, answered from one snapshot). Admission stamps each transaction with
//! `(ts, txn_id)`; that pair is the total order every other component must
//! respect.
//!
//! Sealing a batch turns it into an `EpochPlan`: for every touched key, the
//! ops that touch it in `(ts, txn_id)` order. Chains for different keys
//! commute, so executors can fold them in parallel and still land on the
//! serial result.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use crate::store::{Namespace, ShardKey, ShardValue, StoreConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnKind {
    Update,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateOp {
    Read { key: ShardKey },
    Write { key: ShardKey, value: ShardValue },
    Apply { key: ShardKey, delta: Vec<f64> },
}

impl StateOp {
    pub fn key(&self) -> &ShardKey {
        match self {
            StateOp::Read { key } | StateOp::Write { key, .. } | StateOp::Apply { key, .. } => key,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Transaction {
    pub kind: TxnKind,
    pub ops: Vec<StateOp>,
}

impl Transaction {
    pub fn update(ops: Vec<StateOp>) -> Self {
        Transaction { kind: TxnKind::Update, ops }
    }

    pub fn inference(keys: Vec<ShardKey>) -> Self {
        Transaction { kind: TxnKind::Inference, ops: keys.into_iter().map(|key| StateOp::Read { key }).collect() }
    }

    /// Structural checks only; anything that needs current state (dimension
    /// agreement, overflow) is validated at execution.
    pub fn validate(&self) -> Result<(), String> {
        if self.ops.is_empty() {
            return Err("transaction has no ops".into());
        }
        let mut seen: HashSet<&ShardKey> = HashSet::with_capacity(self.ops.len());
        for op in &self.ops {
            if !seen.insert(op.key()) {
                return Err(format!("key {:?} appears more than once", op.key()));
            }
            match (self.kind, op) {
                (TxnKind::Update, StateOp::Read { key }) => {
                    return Err(format!("update transaction contains a read of {key:?}"));
                }
                (TxnKind::Inference, StateOp::Write { key, .. }) | (TxnKind::Inference, StateOp::Apply { key, .. }) => {
                    return Err(format!("inference transaction mutates {key:?}"));
                }
                (_, StateOp::Write { key, value }) => {
                    value.validate().map_err(|e| e.to_string())?;
                    let ok = matches!(
                        (key.namespace(), value),
                        (Namespace::Params, ShardValue::Params(_)) | (Namespace::Meta, ShardValue::Meta(_))
                    );
                    if !ok {
                        return Err(format!("value type does not match namespace of {key:?}"));
                    }
                }
                (_, StateOp::Apply { key, delta }) => {
                    if key.namespace() != Namespace::Params {
                        return Err(format!("apply targets non-params key {key:?}"));
                    }
                    if delta.is_empty() {
                        return Err(format!("apply to {key:?} has empty delta"));
                    }
                    if let Some(x) = delta.iter().find(|x| !x.is_finite()) {
                        return Err(format!("apply to {key:?} has non-finite delta {x}"));
                    }
                }
                (_, StateOp::Read { .. }) => {}
            }
        }
        Ok(())
    }
}

/// Transaction plus its admission stamp. `admitted_at` feeds latency
/// accounting and never affects ordering.
#[derive(Debug, Clone)]
pub struct AdmittedTxn {
    pub txn_id: u64,
    pub ts: u64,
    pub admitted_at: Instant,
    pub txn: Transaction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    /// Failed structural validation at admission, or failed during epoch
    /// execution (dimension conflict, non-finite result).
    Validation(String),
    /// Admission queue was full.
    Backpressure,
    /// Engine halted after a commit-path failure.
    Halted,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::Validation(msg) => write!(f, "validation: {msg}"),
            RejectReason::Backpressure => write!(f, "backpressure"),
            RejectReason::Halted => write!(f, "halted"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TxnStatus {
    Committed { epoch: u64 },
    Rejected { reason: RejectReason },
}

#[derive(Debug, Clone)]
pub struct ReadResult {
    pub key: ShardKey,
    pub value: Option<Arc<ShardValue>>,
}

/// Exactly one outcome is emitted per admitted transaction; the harness
/// reconciles counts against this stream.
#[derive(Debug, Clone)]
pub struct TxnOutcome {
    pub txn_id: u64,
    pub ts: u64,
    pub kind: TxnKind,
    pub status: TxnStatus,
    /// Populated for inference transactions, in request key order.
    pub reads: Vec<ReadResult>,
    pub latency_ns: u64,
}

impl TxnOutcome {
    pub fn epoch(&self) -> Option<u64> {
        match self.status {
            TxnStatus::Committed { epoch } => Some(epoch),
            TxnStatus::Rejected { .. } => None,
        }
    }
}

/// Position of one op inside the plan's txn list.
#[derive(Debug, Clone, Copy)]
pub struct ChainOp {
    pub ts: u64,
    pub txn_id: u64,
    pub txn_idx: u32,
    pub op_idx: u32,
}

/// All ops touching one key within an epoch, in `(ts, txn_id)` order.
#[derive(Debug)]
pub struct Chain {
    pub key: ShardKey,
    pub partition: u32,
    pub executor: u32,
    pub ops: Vec<ChainOp>,
}

/// A sealed epoch: an immutable execution plan shared by the coordinator and
/// every executor. `txns` is ascending in `(ts, txn_id)`; chains index into
/// it rather than duplicating op payloads.
#[derive(Debug)]
pub struct EpochPlan {
    pub epoch_id: u64,
    pub txns: Vec<AdmittedTxn>,
    pub chains: Vec<Chain>,
}

impl EpochPlan {
    pub fn op(&self, cop: ChainOp) -> &StateOp {
        &self.txns[cop.txn_idx as usize].txn.ops[cop.op_idx as usize]
    }
}

/// Group a batch into per-key chains and assign each chain to an executor by
/// `partition mod executors`. The sort is a no-op for batches that arrive in
/// admission order but keeps the plan correct if they don't.
pub fn seal_epoch(epoch_id: u64, mut batch: Vec<AdmittedTxn>, store_cfg: &StoreConfig, executors: u32) -> EpochPlan {
    batch.sort_by_key(|t| (t.ts, t.txn_id));
    let mut by_key: std::collections::BTreeMap<ShardKey, Vec<ChainOp>> = std::collections::BTreeMap::new();
    for (txn_idx, at) in batch.iter().enumerate() {
        for (op_idx, op) in at.txn.ops.iter().enumerate() {
            by_key.entry(op.key().clone()).or_default().push(ChainOp {
                ts: at.ts,
                txn_id: at.txn_id,
                txn_idx: txn_idx as u32,
                op_idx: op_idx as u32,
            });
        }
    }
    let chains = by_key
        .into_iter()
        .map(|(key, ops)| {
            let partition = crate::store::partition_of(&key, store_cfg);
            Chain { key, partition, executor: partition % executors.max(1), ops }
        })
        .collect();
    EpochPlan { epoch_id, txns: batch, chains }
}
