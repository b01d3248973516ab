//! tstream: a transactional stream processing engine for shared model state.
//!
//! The engine keeps model parameters and small metadata blobs in a
//! partitioned, multi-versioned in-memory store. Writers never mutate state
//! directly: every change is a transaction that is admitted, batched into an
//! epoch, executed deterministically across a pool of executors, logged, and
//! only then made visible. Readers run against immutable snapshots and never
//! block writers.
//!
//! Layout:
//!
//! ```text
//!   ingest ──> work items ──> engine (admission -> epochs -> executors)
//!                                │
//!                  durability ◄──┤ (write-ahead log + checkpoints)
//!                                │
//!                     store  ◄───┘ (partitioned MVCC, snapshots)
//!
//!   learn    gradient-based updates expressed as transactions
//!   harness  workload generation, serial oracle, metrics, crash drills
//! ```
//!
//! The one ordering rule everything hangs off: transactions are totally
//! ordered by `(ts, txn_id)` assigned at admission, and any schedule the
//! engine produces must be indistinguishable from executing them one at a
//! time in that order.

pub mod codec;
pub mod durability;
pub mod engine;
pub mod error;
mod exec;
pub mod harness;
pub mod ingest;
pub mod learn;
pub mod store;
pub mod txn;

pub use engine::{Admission, Engine, EngineConfig, EngineStats};
pub use error::{Error, Result};
pub use store::{Namespace, ShardKey, ShardValue, SnapshotHandle, StateStore, StoreConfig};
pub use txn::{RejectReason, StateOp, Transaction, TxnKind, TxnOutcome, TxnStatus};
