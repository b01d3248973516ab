//! Workload harness: synthesize traces, replay them through the engine,
//! predict the answer independently, and measure.
//!
//! The pieces fit together like this:
//!
//!   WorkloadSpec --generate--> [StreamEvent] --trace file (optional)
//!        |
//!        |   +-----------------------------------------------+
//!        +-> | runner: ingest -> work items -> transactions   | -> dump A
//!        |   |         against the real engine (E executors)  |    metrics
//!        |   +-----------------------------------------------+
//!        |
//!        |   +-----------------------------------------------+
//!        +-> | oracle: same items, one thread, no epochs,     | -> dump B
//!            |         its own execution rules                |
//!            +-----------------------------------------------+
//!
//! Dump A must equal dump B byte for byte whenever update content does not
//! depend on read timing (always for Synthetic and Traffic, and for
//! Healthcare when the run is closed-loop). The oracle shares the workload
//! mapping, the client-side learner math, and the dump codec with the
//! runner, because those are contracts both sides must agree on; it does
//! not share the store, the executor pool, or the commit path, which are
//! the things under test.
//!
//! Scenario shapes:
//!   Synthetic   one dyadic-valued feature per observation, key chosen by
//!               the skew picker. Observations become single Apply updates,
//!               queries read one key. The values are exact in f64, so any
//!               engine/oracle divergence is a real ordering bug, never
//!               rounding.
//!   Traffic     per-segment counters (+1 per observation) summed by a
//!               tumbling time window before they reach the engine; queries
//!               read three distinct segments at once. A one-second window
//!               in the middle of the trace multiplies the query share by
//!               ten, the way an incident floods a dashboard.
//!   Healthcare  labeled vitals driving an online logistic model through
//!               the learner client, plus steady prediction queries. Labels
//!               come from a fixed ground-truth separator with a margin, so
//!               accuracy is a meaningful score.
//!
//! Event timestamps count simulated milliseconds; one event per tick at the
//! nominal rate, which makes "a second" in a trace a thousand events.

mod oracle;
mod report;
mod runner;

pub use oracle::{oracle_events, SerialOracle};
pub use report::{LatencySummary, MetricsReport, StalenessHistogram};
pub use runner::{engine_dump, run_events, run_with_crash, CrashOutput, RunOptions, RunOutput};

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Clause, PipelineSpec, Reducer, Stage, StreamEvent, Window, WorkItem};
use crate::learn::{ModelKind, ModelSpec};
use crate::store::ShardKey;
use crate::txn::{StateOp, Transaction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    Synthetic,
    Healthcare,
    Traffic,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Scenario> {
        match s.to_ascii_lowercase().as_str() {
            "synthetic" => Ok(Scenario::Synthetic),
            "healthcare" => Ok(Scenario::Healthcare),
            "traffic" => Ok(Scenario::Traffic),
            other => Err(Error::invalid(format!(
                "unknown scenario {other:?}, expected synthetic, healthcare, or traffic"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Synthetic => "synthetic",
            Scenario::Healthcare => "healthcare",
            Scenario::Traffic => "traffic",
        }
    }
}

/// How the runner feeds admitted events to the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arrival {
    /// Wait for each update's commit before the next event. Serializes the
    /// run; with it, even read-dependent updates are reproducible.
    ClosedLoop,
    /// Pace ingestion at `per_sec` events per wall second; 0 means no
    /// pacing at all (as fast as the engine admits).
    FixedRate { per_sec: u32 },
}

impl Arrival {
    pub fn parse(s: &str) -> Result<Arrival> {
        if s.eq_ignore_ascii_case("closed") || s.eq_ignore_ascii_case("closed-loop") {
            return Ok(Arrival::ClosedLoop);
        }
        if let Some(rate) = s.strip_prefix("rate:") {
            let per_sec = rate
                .parse()
                .map_err(|_| Error::invalid(format!("bad arrival rate {rate:?}")))?;
            return Ok(Arrival::FixedRate { per_sec });
        }
        if s.eq_ignore_ascii_case("open") {
            return Ok(Arrival::FixedRate { per_sec: 0 });
        }
        Err(Error::invalid(format!(
            "unknown arrival {s:?}, expected closed, open, or rate:<per-sec>"
        )))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub scenario: Scenario,
    pub events: u64,
    /// Distinct keys for Synthetic and Traffic. Healthcare has a fixed
    /// two-feature model and ignores this.
    pub keys: u32,
    /// Zipf exponent for key choice; 0 is exactly uniform.
    pub zipf: f64,
    /// Fraction of events that are observations (the rest are queries).
    pub update_mix: f64,
    pub seed: u64,
    pub arrival: Arrival,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.keys == 0 {
            return Err(Error::invalid("keys must be >= 1"));
        }
        if !(self.zipf.is_finite() && self.zipf >= 0.0) {
            return Err(Error::invalid("zipf exponent must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.update_mix) || !self.update_mix.is_finite() {
            return Err(Error::invalid("update_mix must be in [0, 1]"));
        }
        if let Arrival::FixedRate { per_sec } = self.arrival {
            let _ = per_sec;
        }
        Ok(())
    }
}

/// Ground truth for the Healthcare separator: score = 2*hr - 3*spo2 + 0.5
/// over standardized vitals, label = score > 0. Kept with a margin so a
/// learned model can actually reach high holdout accuracy.
pub const HEALTHCARE_FEATURES: [&str; 2] = ["hr", "spo2"];
pub const HEALTHCARE_TRUE_W: [f64; 2] = [2.0, -3.0];
pub const HEALTHCARE_TRUE_B: f64 = 0.5;
const HEALTHCARE_MARGIN: f64 = 0.25;

/// Traffic's incident burst: for this many simulated milliseconds starting
/// at the trace midpoint, the query share is multiplied by ten (capped so
/// some observations still flow).
const BURST_SPAN_MS: u64 = 1000;
const BURST_QUERY_FACTOR: f64 = 10.0;
const BURST_QUERY_CAP: f64 = 0.95;

/// Key chooser: uniform when the exponent is zero, otherwise Zipf ranks
/// with rank 1 mapped to key 0, so low-numbered keys are the hot ones.
struct KeyPicker {
    keys: u32,
    zipf: Option<rand_distr::Zipf<f64>>,
}

impl KeyPicker {
    fn new(keys: u32, exponent: f64) -> Result<KeyPicker> {
        let zipf = if exponent > 0.0 {
            Some(
                rand_distr::Zipf::new(keys as u64, exponent)
                    .map_err(|e| Error::invalid(format!("bad zipf parameters: {e}")))?,
            )
        } else {
            None
        };
        Ok(KeyPicker { keys, zipf })
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> u32 {
        match &self.zipf {
            None => rng.gen_range(0..self.keys),
            Some(z) => z.sample(rng) as u32 - 1,
        }
    }

    /// Up to `want` distinct keys, ascending. Falls back to linear fill if
    /// the skew keeps hitting the same keys.
    fn pick_distinct(&self, rng: &mut ChaCha8Rng, want: usize) -> Vec<u32> {
        let want = want.min(self.keys as usize);
        let mut set = std::collections::BTreeSet::new();
        let mut attempts = 0;
        while set.len() < want && attempts < 64 {
            set.insert(self.pick(rng));
            attempts += 1;
        }
        let mut fill = 0;
        while set.len() < want {
            set.insert(fill);
            fill += 1;
        }
        set.into_iter().collect()
    }
}

/// Deterministic trace synthesis: the same spec always yields the same
/// events, and everything downstream of the trace is deterministic too.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<StreamEvent>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let picker = KeyPicker::new(spec.keys, spec.zipf)?;
    let burst_start = spec.events / 2;

    let mut out = Vec::with_capacity(spec.events as usize);
    for i in 0..spec.events {
        let ts = i;
        let mut p_update = spec.update_mix;
        if spec.scenario == Scenario::Traffic && ts >= burst_start && ts < burst_start + BURST_SPAN_MS {
            let p_query = ((1.0 - spec.update_mix) * BURST_QUERY_FACTOR).min(BURST_QUERY_CAP);
            p_update = 1.0 - p_query;
        }
        let is_update = rng.gen::<f64>() < p_update;
        let event = match spec.scenario {
            Scenario::Synthetic => {
                let source = format!("syn-{}", i % 3);
                let key = format!("k{}", picker.pick(&mut rng));
                if is_update {
                    // Multiples of 0.25 in [-2, 2]: exact in f64 and exact
                    // under any number of additions at trace scale.
                    let delta = rng.gen_range(-8i32..=8) as f64 * 0.25;
                    StreamEvent::observation(&source, ts, vec![(key, delta)], None)
                } else {
                    StreamEvent::query(&source, ts, vec![(key, 0.0)])
                }
            }
            Scenario::Traffic => {
                let source = format!("cam-{}", i % 4);
                if is_update {
                    let key = format!("seg{}", picker.pick(&mut rng));
                    StreamEvent::observation(&source, ts, vec![(key, 1.0)], None)
                } else {
                    let features = picker
                        .pick_distinct(&mut rng, 3)
                        .into_iter()
                        .map(|k| (format!("seg{k}"), 0.0))
                        .collect();
                    StreamEvent::query(&source, ts, features)
                }
            }
            Scenario::Healthcare => {
                let source = format!("ward-{}", i % 2);
                let (hr, spo2, score) = loop {
                    let hr = rng.gen_range(-2.0..2.0);
                    let spo2 = rng.gen_range(-2.0..2.0);
                    let score = HEALTHCARE_TRUE_W[0] * hr + HEALTHCARE_TRUE_W[1] * spo2 + HEALTHCARE_TRUE_B;
                    if score.abs() >= HEALTHCARE_MARGIN {
                        break (hr, spo2, score);
                    }
                };
                let features = vec![("hr".to_string(), hr), ("spo2".to_string(), spo2)];
                if is_update {
                    let label = if score > 0.0 { 1.0 } else { 0.0 };
                    StreamEvent::observation(&source, ts, features, Some(label))
                } else {
                    StreamEvent::query(&source, ts, features)
                }
            }
        };
        out.push(event);
    }
    Ok(out)
}

/// Labeled holdout drawn from the same ground truth but a caller-chosen
/// seed, for scoring a trained model against examples it never saw.
pub fn healthcare_holdout(seed: u64, n: usize) -> Vec<([f64; 2], f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let hr = rng.gen_range(-2.0..2.0);
        let spo2 = rng.gen_range(-2.0..2.0);
        let score = HEALTHCARE_TRUE_W[0] * hr + HEALTHCARE_TRUE_W[1] * spo2 + HEALTHCARE_TRUE_B;
        if score.abs() < HEALTHCARE_MARGIN {
            continue;
        }
        out.push(([hr, spo2], if score > 0.0 { 1.0 } else { 0.0 }));
    }
    out
}

/// The stage program each scenario runs in front of the engine. Synthetic
/// is a bare pass-through on purpose: it is the workload used to argue
/// about transaction-level properties, so nothing should reshape it.
pub fn pipeline_for(scenario: Scenario) -> PipelineSpec {
    match scenario {
        Scenario::Synthetic => PipelineSpec { stages: vec![] },
        Scenario::Healthcare => PipelineSpec {
            stages: vec![Stage::Filter {
                all: vec![
                    Clause::Has { field: "hr".to_string() },
                    Clause::Has { field: "spo2".to_string() },
                ],
            }],
        },
        Scenario::Traffic => PipelineSpec {
            stages: vec![Stage::Aggregate { window: Window::Time(50), reducer: Reducer::Sum }],
        },
    }
}

pub fn healthcare_model_spec() -> ModelSpec {
    ModelSpec::new(
        ModelKind::Logistic,
        HEALTHCARE_FEATURES.iter().map(|s| s.to_string()).collect(),
    )
}

/// Direct mapping for scenarios whose updates are self-contained: one
/// Apply per feature, in item order. The learner path does not use this.
pub fn direct_update_txn(features: &[(String, f64)]) -> Result<Transaction> {
    let mut ops = Vec::with_capacity(features.len());
    for (name, value) in features {
        ops.push(StateOp::Apply { key: ShardKey::params(name.clone())?, delta: vec![*value] });
    }
    Ok(Transaction::update(ops))
}

/// Read transaction over the distinct feature keys, first-seen order.
pub fn direct_inference_txn(features: &[(String, f64)]) -> Result<Transaction> {
    let mut seen = std::collections::HashSet::new();
    let mut keys = Vec::with_capacity(features.len());
    for (name, _) in features {
        if seen.insert(name.as_str()) {
            keys.push(ShardKey::params(name.clone())?);
        }
    }
    Ok(Transaction::inference(keys))
}

/// Pull (x, y) out of a Healthcare training item, in model feature order.
/// None when a feature or the label is missing; both sides of the
/// engine/oracle comparison must skip exactly these.
pub fn healthcare_example(item: &WorkItem) -> Option<([f64; 2], f64)> {
    let WorkItem::TrainExample { features, label, .. } = item else {
        return None;
    };
    let y = (*label)?;
    let mut x = [0.0f64; 2];
    for (i, want) in HEALTHCARE_FEATURES.iter().enumerate() {
        x[i] = features.iter().find(|(n, _)| n == want).map(|(_, v)| *v)?;
    }
    Some((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::EventBody;

    fn spec(scenario: Scenario, events: u64, zipf: f64, mix: f64, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            scenario,
            events,
            keys: 4,
            zipf,
            update_mix: mix,
            seed,
            arrival: Arrival::FixedRate { per_sec: 0 },
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate(&spec(Scenario::Synthetic, 500, 0.8, 0.7, 42)).unwrap();
        let b = generate(&spec(Scenario::Synthetic, 500, 0.8, 0.7, 42)).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec(Scenario::Synthetic, 500, 0.8, 0.7, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mix_extremes_produce_single_kind() {
        let all_obs = generate(&spec(Scenario::Synthetic, 300, 0.0, 1.0, 7)).unwrap();
        assert!(all_obs.iter().all(|e| matches!(e.body, EventBody::Observation { .. })));
        let all_query = generate(&spec(Scenario::Synthetic, 300, 0.0, 0.0, 7)).unwrap();
        assert!(all_query.iter().all(|e| matches!(e.body, EventBody::Query { .. })));
    }

    #[test]
    fn uniform_picker_spreads_keys_evenly() {
        let events = generate(&spec(Scenario::Synthetic, 8000, 0.0, 1.0, 11)).unwrap();
        let mut counts = [0u64; 4];
        for e in &events {
            if let EventBody::Observation { features, .. } = &e.body {
                let idx: usize = features[0].0[1..].parse().unwrap();
                counts[idx] += 1;
            }
        }
        let expect = 8000.0 / 4.0;
        for c in counts {
            let rel = (c as f64 - expect).abs() / expect;
            assert!(rel < 0.05, "key frequency {c} deviates {rel:.3} from uniform");
        }
    }

    #[test]
    fn skewed_picker_concentrates_on_low_keys() {
        let mut w = spec(Scenario::Synthetic, 8000, 0.99, 1.0, 11);
        w.keys = 64;
        let events = generate(&w).unwrap();
        let mut hot = 0u64;
        let mut total = 0u64;
        for e in &events {
            if let EventBody::Observation { features, .. } = &e.body {
                total += 1;
                if features[0].0 == "k0" {
                    hot += 1;
                }
            }
        }
        // Uniform share would be 1/64; the hot key must far exceed it.
        assert!(hot as f64 / total as f64 > 3.0 / 64.0, "hot key got {hot}/{total}");
    }

    #[test]
    fn traffic_burst_floods_queries_mid_trace() {
        let events = generate(&spec(Scenario::Traffic, 4000, 0.0, 0.9, 5)).unwrap();
        let query_share = |range: std::ops::Range<u64>| {
            let slice: Vec<_> = events.iter().filter(|e| range.contains(&e.ts)).collect();
            let q = slice.iter().filter(|e| matches!(e.body, EventBody::Query { .. })).count();
            q as f64 / slice.len() as f64
        };
        let before = query_share(0..2000);
        let during = query_share(2000..3000);
        assert!(before < 0.2, "baseline query share {before}");
        assert!(during > 0.7, "burst query share {during}");
    }

    #[test]
    fn healthcare_labels_match_ground_truth_with_margin() {
        let events = generate(&spec(Scenario::Healthcare, 500, 0.0, 1.0, 3)).unwrap();
        for e in &events {
            let EventBody::Observation { features, label } = &e.body else {
                panic!("expected observation")
            };
            let hr = features.iter().find(|(n, _)| n == "hr").unwrap().1;
            let spo2 = features.iter().find(|(n, _)| n == "spo2").unwrap().1;
            let score = HEALTHCARE_TRUE_W[0] * hr + HEALTHCARE_TRUE_W[1] * spo2 + HEALTHCARE_TRUE_B;
            assert!(score.abs() >= HEALTHCARE_MARGIN);
            assert_eq!(label.unwrap(), if score > 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn traces_survive_the_file_format() {
        let events = generate(&spec(Scenario::Traffic, 400, 0.5, 0.8, 9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.trace");
        crate::ingest::trace::write_trace(&path, &events).unwrap();
        let back = crate::ingest::trace::read_trace(&path).unwrap();
        assert_eq!(events, back);
    }

    #[test]
    fn direct_mappings_shape_transactions() {
        let up = direct_update_txn(&[("k1".to_string(), 0.5), ("k2".to_string(), -1.0)]).unwrap();
        assert_eq!(up.ops.len(), 2);
        assert!(matches!(&up.ops[0], StateOp::Apply { delta, .. } if delta == &vec![0.5]));
        up.validate().unwrap();

        let inf =
            direct_inference_txn(&[("a".to_string(), 0.0), ("a".to_string(), 0.0), ("b".to_string(), 0.0)])
                .unwrap();
        assert_eq!(inf.ops.len(), 2, "duplicate keys collapse");
        inf.validate().unwrap();
    }

    #[test]
    fn scenario_pipelines_validate() {
        for s in [Scenario::Synthetic, Scenario::Healthcare, Scenario::Traffic] {
            pipeline_for(s).validate().unwrap();
        }
    }

    #[test]
    fn parse_helpers_accept_cli_spellings() {
        assert_eq!(Scenario::parse("Healthcare").unwrap(), Scenario::Healthcare);
        assert!(Scenario::parse("bogus").is_err());
        assert_eq!(Arrival::parse("closed").unwrap(), Arrival::ClosedLoop);
        assert_eq!(Arrival::parse("open").unwrap(), Arrival::FixedRate { per_sec: 0 });
        assert_eq!(Arrival::parse("rate:500").unwrap(), Arrival::FixedRate { per_sec: 500 });
        assert!(Arrival::parse("rate:fast").is_err());
    }
}
