//! The reference executor: one thread, one flat map, no epochs, no log.
//!
//! It replays a trace through its own copy of the ingest pipeline and
//! executes every transaction in admission order against a BTreeMap,
//! staging each transaction and keeping it only if every operation
//! succeeds. The execution rules are written out again here on purpose:
//! the whole point is that two independent implementations of "what a
//! transaction does" agree byte for byte, so this file must not call into
//! the engine's fold. What it does share with the runner is the workload
//! mapping, the learner client, and the dump codec, which are contracts,
//! not machinery.
//!
//! Stamps mirror admission: every transaction the runner would submit
//! consumes one stamp here, including refused ones, so oracle stamps line
//! up with engine txn ids run-for-run. `stamp_ceiling` turns the oracle
//! into a prefix oracle: updates stamped above the ceiling are ignored,
//! which is exactly the state a recovered engine reports after a crash
//! that truncated the log at that stamp.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ingest::{IngestAck, IngestConfig, IngestCounters, Ingestor, StreamEvent, WorkItem};
use crate::learn::OnlineLearner;
use crate::store::{ShardKey, ShardValue};
use crate::txn::{ReadResult, StateOp, Transaction, TxnKind, TxnOutcome, TxnStatus};

use super::{
    direct_inference_txn, direct_update_txn, healthcare_example, healthcare_model_spec, pipeline_for,
    Scenario,
};

pub struct SerialOracle {
    scenario: Scenario,
    state: BTreeMap<ShardKey, ShardValue>,
    learner: Option<OnlineLearner>,
    clock: u64,
    stamp_ceiling: Option<u64>,
    pub updates_committed: u64,
    pub updates_rejected: u64,
    pub inference_served: u64,
    pub examples_skipped: u64,
}

impl SerialOracle {
    pub fn new(scenario: Scenario) -> Result<SerialOracle> {
        Self::with_stamp_ceiling(scenario, None)
    }

    /// `stamp_ceiling`: ignore update transactions stamped above this, as a
    /// crash at that stamp would have.
    pub fn with_stamp_ceiling(scenario: Scenario, stamp_ceiling: Option<u64>) -> Result<SerialOracle> {
        let learner = match scenario {
            Scenario::Healthcare => Some(OnlineLearner::new(healthcare_model_spec())?),
            _ => None,
        };
        Ok(SerialOracle {
            scenario,
            state: BTreeMap::new(),
            learner,
            clock: 0,
            stamp_ceiling,
            updates_committed: 0,
            updates_rejected: 0,
            inference_served: 0,
            examples_skipped: 0,
        })
    }

    fn stamp(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn consume(&mut self, item: &WorkItem) -> Result<()> {
        match (self.scenario, item) {
            (Scenario::Healthcare, WorkItem::TrainExample { .. }) => {
                let Some((x, y)) = healthcare_example(item) else {
                    self.examples_skipped += 1;
                    return Ok(());
                };
                let read_id = self.stamp();
                let reads = self.serve_reads(read_id);
                self.inference_served += 1;
                let learner = self.learner.as_ref().expect("healthcare oracle has a learner");
                let step = match learner.train_step(&reads, &x, y) {
                    Ok(s) => s,
                    Err(_) => {
                        self.examples_skipped += 1;
                        return Ok(());
                    }
                };
                let id = self.stamp();
                self.try_commit(&step.txn, id);
                Ok(())
            }
            (_, WorkItem::TrainExample { features, .. }) => {
                let txn = direct_update_txn(features)?;
                let id = self.stamp();
                self.try_commit(&txn, id);
                Ok(())
            }
            (Scenario::Healthcare, WorkItem::InferenceRequest { .. }) => {
                let id = self.stamp();
                let _ = self.serve_reads(id);
                self.inference_served += 1;
                Ok(())
            }
            (_, WorkItem::InferenceRequest { features, .. }) => {
                // Reads cannot change state; the txn is built and validated
                // anyway so a malformed query counts the same on both sides.
                let txn = direct_inference_txn(features)?;
                self.stamp();
                match txn.validate() {
                    Ok(()) => self.inference_served += 1,
                    Err(_) => self.updates_rejected += 1,
                }
                Ok(())
            }
        }
    }

    /// A read outcome over the learner's key set, answered from local
    /// state. Shape-compatible with what the engine hands back, which is
    /// what lets the shared learner client run against either.
    fn serve_reads(&self, txn_id: u64) -> TxnOutcome {
        let learner = self.learner.as_ref().expect("reads served for the learner only");
        let reads: Vec<ReadResult> = learner
            .read_txn()
            .ops
            .iter()
            .map(|op| {
                let key = op.key().clone();
                let value = self.state.get(&key).cloned().map(Arc::new);
                ReadResult { key, value }
            })
            .collect();
        TxnOutcome {
            txn_id,
            ts: txn_id,
            kind: TxnKind::Inference,
            status: TxnStatus::Committed { epoch: 0 },
            reads,
            latency_ns: 0,
        }
    }

    fn try_commit(&mut self, txn: &Transaction, id: u64) {
        if txn.validate().is_err() {
            self.updates_rejected += 1;
            return;
        }
        if let Some(ceil) = self.stamp_ceiling {
            if id > ceil {
                return;
            }
        }
        // All-or-nothing: stage onto an overlay, fold in only on success.
        let mut staged: Vec<(ShardKey, ShardValue)> = Vec::with_capacity(txn.ops.len());
        for op in &txn.ops {
            let key = op.key();
            let cur = staged
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v)
                .or_else(|| self.state.get(key));
            match step_op(cur, op) {
                Ok(next) => staged.push((key.clone(), next)),
                Err(_) => {
                    self.updates_rejected += 1;
                    return;
                }
            }
        }
        for (k, v) in staged {
            self.state.insert(k, v);
        }
        self.updates_committed += 1;
    }

    /// Byte-exact counterpart of the engine's state dump.
    pub fn dump(&self) -> Vec<u8> {
        let entries: Vec<(ShardKey, Arc<ShardValue>)> =
            self.state.iter().map(|(k, v)| (k.clone(), Arc::new(v.clone()))).collect();
        crate::codec::encode_dump(&entries)
    }
}

/// One operation against the current value of its key. This mirrors the
/// engine's semantics but is written independently of it.
fn step_op(cur: Option<&ShardValue>, op: &StateOp) -> std::result::Result<ShardValue, String> {
    match op {
        StateOp::Read { .. } => Err("read inside an update".to_string()),
        StateOp::Write { value, .. } => {
            if let (Some(ShardValue::Params(old)), ShardValue::Params(new)) = (cur, value) {
                if old.len() != new.len() {
                    return Err(format!("write changes dim {} -> {}", old.len(), new.len()));
                }
            }
            Ok(value.clone())
        }
        StateOp::Apply { delta, .. } => match cur {
            None => Ok(ShardValue::Params(delta.clone())),
            Some(ShardValue::Params(v)) => {
                if v.len() != delta.len() {
                    return Err(format!("apply dim {} against value dim {}", delta.len(), v.len()));
                }
                let next: Vec<f64> = v.iter().zip(delta).map(|(a, b)| a + b).collect();
                if next.iter().any(|x| !x.is_finite()) {
                    return Err("apply produced non-finite".to_string());
                }
                Ok(ShardValue::Params(next))
            }
            Some(ShardValue::Meta(_)) => Err("apply against meta".to_string()),
        },
    }
}

#[derive(Debug)]
pub struct OracleOutput {
    pub dump: Vec<u8>,
    pub ingest: IngestCounters,
    pub updates_committed: u64,
    pub updates_rejected: u64,
    pub inference_served: u64,
    pub examples_skipped: u64,
}

/// Run a whole trace through the oracle, ingest pipeline included, and
/// return the final dump plus its accounting.
pub fn oracle_events(
    events: &[StreamEvent],
    scenario: Scenario,
    stamp_ceiling: Option<u64>,
) -> Result<OracleOutput> {
    let (ingestor, queue) = Ingestor::new(pipeline_for(scenario), IngestConfig::default())?;
    let mut oracle = SerialOracle::with_stamp_ceiling(scenario, stamp_ceiling)?;
    for event in events {
        match ingestor.ingest(event.clone()) {
            IngestAck::Accepted | IngestAck::Dropped(_) => {}
        }
        for item in queue.drain() {
            oracle.consume(&item)?;
        }
    }
    ingestor.finish();
    for item in queue.drain() {
        oracle.consume(&item)?;
    }
    let ingest = queue.counters();
    if !ingest.is_conserved() || ingest.in_flight() != 0 {
        return Err(Error::invalid(format!("oracle ingest accounting broken: {ingest:?}")));
    }
    Ok(OracleOutput {
        dump: oracle.dump(),
        ingest,
        updates_committed: oracle.updates_committed,
        updates_rejected: oracle.updates_rejected,
        inference_served: oracle.inference_served,
        examples_skipped: oracle.examples_skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::decode_dump;
    use crate::harness::{generate, Arrival, WorkloadSpec};
    use crate::learn::TrainingMeta;

    fn item(features: &[(&str, f64)]) -> WorkItem {
        WorkItem::TrainExample {
            source: "t".to_string(),
            features: features.iter().map(|(n, v)| (n.to_string(), *v)).collect(),
            label: None,
            origin_ts: 0,
            events: 1,
        }
    }

    #[test]
    fn applies_accumulate_per_key() {
        let mut o = SerialOracle::new(Scenario::Synthetic).unwrap();
        o.consume(&item(&[("k1", 0.5)])).unwrap();
        o.consume(&item(&[("k1", 0.25)])).unwrap();
        o.consume(&item(&[("k2", -1.0)])).unwrap();
        assert_eq!(o.updates_committed, 3);
        let entries = decode_dump(&o.dump()).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].1.as_params().unwrap(), &[0.75]);
        assert_eq!(entries[1].1.as_params().unwrap(), &[-1.0]);
    }

    #[test]
    fn non_finite_apply_rejects_whole_transaction() {
        let mut o = SerialOracle::new(Scenario::Synthetic).unwrap();
        o.consume(&item(&[("k", f64::MAX)])).unwrap();
        o.consume(&item(&[("k", f64::MAX)])).unwrap();
        assert_eq!(o.updates_committed, 1);
        assert_eq!(o.updates_rejected, 1);
        let entries = decode_dump(&o.dump()).unwrap();
        assert_eq!(entries[0].1.as_params().unwrap(), &[f64::MAX]);
    }

    #[test]
    fn invalid_transaction_is_refused_not_applied() {
        let mut o = SerialOracle::new(Scenario::Synthetic).unwrap();
        o.consume(&item(&[("k", f64::NAN)])).unwrap();
        assert_eq!(o.updates_rejected, 1);
        assert!(decode_dump(&o.dump()).unwrap().is_empty());
    }

    #[test]
    fn oracle_runs_are_deterministic() {
        let spec = WorkloadSpec {
            scenario: Scenario::Traffic,
            events: 600,
            keys: 8,
            zipf: 0.9,
            update_mix: 0.8,
            seed: 21,
            arrival: Arrival::FixedRate { per_sec: 0 },
        };
        let events = generate(&spec).unwrap();
        let a = oracle_events(&events, Scenario::Traffic, None).unwrap();
        let b = oracle_events(&events, Scenario::Traffic, None).unwrap();
        assert_eq!(a.dump, b.dump);
        assert!(a.updates_committed > 0);
    }

    #[test]
    fn healthcare_steps_update_model_and_tally() {
        let spec = WorkloadSpec {
            scenario: Scenario::Healthcare,
            events: 20,
            keys: 1,
            zipf: 0.0,
            update_mix: 1.0,
            seed: 5,
            arrival: Arrival::ClosedLoop,
        };
        let events = generate(&spec).unwrap();
        let out = oracle_events(&events, Scenario::Healthcare, None).unwrap();
        assert_eq!(out.updates_committed, 20);
        let entries = decode_dump(&out.dump).unwrap();
        let meta = entries
            .iter()
            .find_map(|(k, v)| {
                (k == &crate::learn::training_meta_key()).then(|| v.as_meta().unwrap().to_vec())
            })
            .expect("tally key present");
        assert_eq!(TrainingMeta::decode(&meta).unwrap().examples_seen, 20);
    }

    #[test]
    fn stamp_ceiling_freezes_a_prefix() {
        let spec = WorkloadSpec {
            scenario: Scenario::Synthetic,
            events: 10,
            keys: 2,
            zipf: 0.0,
            update_mix: 1.0,
            seed: 9,
            arrival: Arrival::FixedRate { per_sec: 0 },
        };
        let events = generate(&spec).unwrap();
        // All events are updates, so stamps are 1..=10 and a ceiling of 4
        // matches replaying only the first four events.
        let pre = oracle_events(&events[..4], Scenario::Synthetic, None).unwrap();
        let ceil = oracle_events(&events, Scenario::Synthetic, Some(4)).unwrap();
        assert_eq!(pre.dump, ceil.dump);
    }
}
