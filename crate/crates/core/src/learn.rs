//! Online learners expressed as transactions.
//!
//! A learner is a client of the engine, not a part of it. One training step
//! is two transactions: an inference that reads the model at some snapshot,
//! and an update that applies the resulting gradient as deltas. Because the
//! update is a set of `Apply` ops, steps from concurrent learners compose
//! additively in commit order instead of overwriting each other; the price
//! is that a gradient may be computed against a model that is a few epochs
//! old by the time it lands. `staleness` below measures exactly that gap,
//! commit epoch minus snapshot epoch.
//!
//! Model layout in the store: one params key per weight (`w:<feature>`, dim
//! 1), the bias under `b`, and a 16-byte running tally under the meta key
//! `training_history`. The tally is read-modify-write and therefore only
//! safe with a single writer; weights have no such restriction.
//!
//! The bias is regularized like any other weight. With the default l2 = 0
//! it makes no difference, and it keeps the objective uniform in all
//! parameters, which the finite-difference tests lean on.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::store::{ShardKey, ShardValue};
use crate::txn::{StateOp, Transaction, TxnOutcome, TxnStatus};

pub const TRAINING_META_KEY: &str = "training_history";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Logistic,
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub features: Vec<String>,
    pub learning_rate: f64,
    pub l2: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, features: Vec<String>) -> ModelSpec {
        ModelSpec { kind, features, learning_rate: 0.1, l2: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::invalid("model has no features"));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.features {
            if !seen.insert(f.as_str()) {
                return Err(Error::invalid(format!("duplicate feature {f:?}")));
            }
            weight_key(f)?;
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be finite and positive"));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::invalid("l2 must be finite and non-negative"));
        }
        Ok(())
    }
}

pub fn weight_key(feature: &str) -> Result<ShardKey> {
    ShardKey::params(format!("w:{feature}"))
}

pub fn bias_key() -> ShardKey {
    ShardKey::params("b").expect("static key")
}

pub fn training_meta_key() -> ShardKey {
    ShardKey::meta(TRAINING_META_KEY).expect("static key")
}

/// Running training tally, persisted so it survives restarts with the model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainingMeta {
    pub examples_seen: u64,
    pub cumulative_loss: f64,
}

impl TrainingMeta {
    /// 16 bytes: examples_seen u64 LE, then cumulative_loss f64 LE.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16);
        out.extend_from_slice(&self.examples_seen.to_le_bytes());
        out.extend_from_slice(&self.cumulative_loss.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<TrainingMeta> {
        if bytes.len() != 16 {
            return Err(Error::codec(format!("training meta is {} bytes, want 16", bytes.len())));
        }
        Ok(TrainingMeta {
            examples_seen: u64::from_le_bytes(bytes[..8].try_into().unwrap()),
            cumulative_loss: f64::from_le_bytes(bytes[8..].try_into().unwrap()),
        })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        // Avoids exp overflow for very negative z.
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn raw_score(w: &[f64], b: f64, x: &[f64]) -> f64 {
    debug_assert_eq!(w.len(), x.len());
    w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b
}

/// Model output: the raw score for linear, the positive-class probability
/// for logistic.
pub fn predict(kind: ModelKind, w: &[f64], b: f64, x: &[f64]) -> f64 {
    let z = raw_score(w, b, x);
    match kind {
        ModelKind::Linear => z,
        ModelKind::Logistic => sigmoid(z),
    }
}

const PROB_CLAMP: f64 = 1e-12;

/// Per-example objective the gradient below differentiates: squared error
/// `(z - y)^2 / 2` for linear, log loss for logistic, plus
/// `l2/2 * (|w|^2 + b^2)`.
pub fn objective(kind: ModelKind, l2: f64, w: &[f64], b: f64, x: &[f64], y: f64) -> f64 {
    let z = raw_score(w, b, x);
    let base = match kind {
        ModelKind::Linear => 0.5 * (z - y) * (z - y),
        ModelKind::Logistic => {
            let p = sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
    };
    let reg = 0.5 * l2 * (w.iter().map(|wi| wi * wi).sum::<f64>() + b * b);
    base + reg
}

/// Analytic gradient of `objective` in (w, b). Both losses share the shape
/// `residual * x` with residual `z - y` (linear) or `sigmoid(z) - y`
/// (logistic); regularization adds `l2 * param`.
pub fn gradient(kind: ModelKind, l2: f64, w: &[f64], b: f64, x: &[f64], y: f64) -> (Vec<f64>, f64) {
    let z = raw_score(w, b, x);
    let residual = match kind {
        ModelKind::Linear => z - y,
        ModelKind::Logistic => sigmoid(z) - y,
    };
    let gw = w.iter().zip(x).map(|(wi, xi)| residual * xi + l2 * wi).collect();
    let gb = residual + l2 * b;
    (gw, gb)
}

/// One packaged training step: the update transaction to submit plus the
/// numbers the caller usually wants to log.
#[derive(Debug)]
pub struct TrainStep {
    pub txn: Transaction,
    pub prediction: f64,
    pub loss: f64,
    /// Epoch of the snapshot the gradient was computed against.
    pub snapshot_epoch: u64,
}

/// Current model as read back from the store.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub meta: TrainingMeta,
}

pub struct OnlineLearner {
    spec: ModelSpec,
    weight_keys: Vec<ShardKey>,
    /// txn_id of an in-flight update -> snapshot epoch its gradient used.
    pending: HashMap<u64, u64>,
}

impl OnlineLearner {
    pub fn new(spec: ModelSpec) -> Result<OnlineLearner> {
        spec.validate()?;
        let weight_keys = spec.features.iter().map(|f| weight_key(f)).collect::<Result<Vec<_>>>()?;
        Ok(OnlineLearner { spec, weight_keys, pending: HashMap::new() })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Inference transaction that reads everything a step needs: weights in
    /// feature order, then bias, then the tally.
    pub fn read_txn(&self) -> Transaction {
        let mut keys = self.weight_keys.clone();
        keys.push(bias_key());
        keys.push(training_meta_key());
        Transaction::inference(keys)
    }

    /// Decode the reads of a committed `read_txn` outcome. Absent keys are
    /// the zero-initialized model.
    pub fn model_from_reads(&self, outcome: &TxnOutcome) -> Result<ModelState> {
        let epoch = outcome
            .epoch()
            .ok_or_else(|| Error::invalid("model read was rejected"))?;
        let want = self.weight_keys.len() + 2;
        if outcome.reads.len() != want {
            return Err(Error::invalid(format!(
                "model read returned {} values, want {want}",
                outcome.reads.len()
            )));
        }
        let _ = epoch;
        let mut weights = Vec::with_capacity(self.weight_keys.len());
        for r in &outcome.reads[..self.weight_keys.len()] {
            weights.push(scalar_param(r.value.as_deref())?);
        }
        let bias = scalar_param(outcome.reads[self.weight_keys.len()].value.as_deref())?;
        let meta = match outcome.reads[self.weight_keys.len() + 1].value.as_deref() {
            None => TrainingMeta::default(),
            Some(ShardValue::Meta(bytes)) => TrainingMeta::decode(bytes)?,
            Some(other) => return Err(Error::invalid(format!("tally key holds {other:?}"))),
        };
        Ok(ModelState { weights, bias, meta })
    }

    /// Compute one SGD step against the model in `reads` and package it as
    /// an update transaction. The transaction is atomic: either every weight
    /// delta, the bias delta, and the tally land, or none do.
    pub fn train_step(&self, reads: &TxnOutcome, x: &[f64], y: f64) -> Result<TrainStep> {
        if x.len() != self.weight_keys.len() {
            return Err(Error::invalid(format!(
                "example has {} features, model has {}",
                x.len(),
                self.weight_keys.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || !y.is_finite() {
            return Err(Error::invalid("example contains non-finite values"));
        }
        let state = self.model_from_reads(reads)?;
        let snapshot_epoch = reads.epoch().expect("checked by model_from_reads");

        let prediction = predict(self.spec.kind, &state.weights, state.bias, x);
        let loss = objective(self.spec.kind, self.spec.l2, &state.weights, state.bias, x, y);
        if !loss.is_finite() {
            return Err(Error::invalid(format!("loss diverged to {loss}")));
        }
        let (gw, gb) = gradient(self.spec.kind, self.spec.l2, &state.weights, state.bias, x, y);

        let eta = self.spec.learning_rate;
        let mut ops = Vec::with_capacity(self.weight_keys.len() + 2);
        for (key, g) in self.weight_keys.iter().zip(&gw) {
            ops.push(StateOp::Apply { key: key.clone(), delta: vec![-eta * g] });
        }
        ops.push(StateOp::Apply { key: bias_key(), delta: vec![-eta * gb] });
        let meta = TrainingMeta {
            examples_seen: state.meta.examples_seen + 1,
            cumulative_loss: state.meta.cumulative_loss + loss,
        };
        ops.push(StateOp::Write { key: training_meta_key(), value: ShardValue::Meta(meta.encode()) });

        Ok(TrainStep { txn: Transaction::update(ops), prediction, loss, snapshot_epoch })
    }

    /// Call after submitting a step's transaction so the commit can be
    /// matched back to its snapshot.
    pub fn record_submitted(&mut self, txn_id: u64, snapshot_epoch: u64) {
        self.pending.insert(txn_id, snapshot_epoch);
    }

    /// Feed an outcome from the engine's stream. Returns the step's
    /// staleness (commit epoch - snapshot epoch) if this outcome committed
    /// one of our updates.
    pub fn note_outcome(&mut self, outcome: &TxnOutcome) -> Option<u64> {
        let snapshot_epoch = self.pending.remove(&outcome.txn_id)?;
        match outcome.status {
            TxnStatus::Committed { epoch } => Some(epoch.saturating_sub(snapshot_epoch)),
            TxnStatus::Rejected { .. } => None,
        }
    }

    pub fn pending_steps(&self) -> usize {
        self.pending.len()
    }
}

fn scalar_param(value: Option<&ShardValue>) -> Result<f64> {
    match value {
        None => Ok(0.0),
        Some(ShardValue::Params(v)) if v.len() == 1 => Ok(v[0]),
        Some(ShardValue::Params(v)) => Err(Error::DimMismatch { expected: 1, got: v.len() }),
        Some(other) => Err(Error::invalid(format!("weight key holds {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::txn::{ReadResult, TxnKind};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn sigmoid_matches_reference_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.7310585786300049).abs() < 1e-15);
        assert!((sigmoid(-2.0) - 0.11920292202211755).abs() < 1e-15);
        assert!((sigmoid(0.4) - 0.598687660112452).abs() < 1e-15);
        assert!(sigmoid(40.0) > 1.0 - 1e-15);
        assert!(sigmoid(-40.0) < 1e-15);
        assert!(sigmoid(-745.0) > 0.0); // no underflow to a NaN path
        for z in [-3.0, -0.7, 0.0, 0.2, 5.0] {
            assert!((sigmoid(-z) - (1.0 - sigmoid(z))).abs() < 1e-15);
        }
    }

    #[test]
    fn objective_matches_hand_computed_points() {
        // Logistic, w=[0.3], b=0.1, x=[1.0], y=1, l2=0.01.
        let base = objective(ModelKind::Logistic, 0.0, &[0.3], 0.1, &[1.0], 1.0);
        assert!((base - 0.5130152523999526).abs() < 1e-15);
        let tot = objective(ModelKind::Logistic, 0.01, &[0.3], 0.1, &[1.0], 1.0);
        assert!((tot - 0.5135152523999525).abs() < 1e-15);
        // Linear, w=[0.5,-0.25], b=1, x=[2,4], y=0.5 -> z=1, loss=0.125.
        let lin = objective(ModelKind::Linear, 0.0, &[0.5, -0.25], 1.0, &[2.0, 4.0], 0.5);
        assert_eq!(lin, 0.125);
    }

    /// Central finite difference over the full objective, the independent
    /// check that `gradient` differentiates what `objective` computes.
    fn fd_gradient(kind: ModelKind, l2: f64, w: &[f64], b: f64, x: &[f64], y: f64) -> (Vec<f64>, f64) {
        let h = 1e-6;
        let mut gw = Vec::with_capacity(w.len());
        for i in 0..w.len() {
            let mut lo = w.to_vec();
            let mut hi = w.to_vec();
            lo[i] -= h;
            hi[i] += h;
            gw.push((objective(kind, l2, &hi, b, x, y) - objective(kind, l2, &lo, b, x, y)) / (2.0 * h));
        }
        let gb = (objective(kind, l2, w, b + h, x, y) - objective(kind, l2, w, b - h, x, y)) / (2.0 * h);
        (gw, gb)
    }

    fn assert_close(analytic: f64, fd: f64) {
        let tol = 1e-6 * analytic.abs().max(1.0);
        assert!(
            (analytic - fd).abs() <= tol,
            "analytic {analytic} vs finite difference {fd}"
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut draw = |lo: f64, hi: f64| {
            let mag = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        };
        for kind in [ModelKind::Linear, ModelKind::Logistic] {
            for round in 0..100 {
                let dim = 1 + round % 5;
                let l2 = [0.0, 0.01, 0.1][round % 3];
                let w: Vec<f64> = (0..dim).map(|_| draw(0.05, 1.0)).collect();
                let x: Vec<f64> = (0..dim).map(|_| draw(0.5, 2.0)).collect();
                let b = draw(0.05, 1.0);
                let y = match kind {
                    ModelKind::Linear => draw(0.0, 2.0),
                    ModelKind::Logistic => (round % 2) as f64,
                };
                let (gw, gb) = gradient(kind, l2, &w, b, &x, y);
                let (fw, fb) = fd_gradient(kind, l2, &w, b, &x, y);
                for (a, f) in gw.iter().zip(&fw) {
                    assert_close(*a, *f);
                }
                assert_close(gb, fb);
            }
        }
    }

    #[test]
    fn zero_residual_leaves_only_regularization() {
        // Linear with y exactly z: gradient must be l2 * param, exactly.
        let w = [0.25, -0.5];
        let b = 0.75;
        let x = [2.0, 4.0];
        let y = raw_score(&w, b, &x);
        let (gw, gb) = gradient(ModelKind::Linear, 0.0, &w, b, &x, y);
        assert_eq!(gw, vec![0.0, 0.0]);
        assert_eq!(gb, 0.0);
        let (gw, gb) = gradient(ModelKind::Linear, 0.5, &w, b, &x, y);
        assert_eq!(gw, vec![0.125, -0.25]);
        assert_eq!(gb, 0.375);
    }

    #[test]
    fn training_meta_bytes_are_stable() {
        let m = TrainingMeta { examples_seen: 3, cumulative_loss: 1.5 };
        let bytes = m.encode();
        assert_eq!(bytes, vec![3, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0xF8, 0x3F]);
        assert_eq!(TrainingMeta::decode(&bytes).unwrap(), m);
        assert!(TrainingMeta::decode(&bytes[..15]).is_err());
    }

    fn fake_reads(learner: &OnlineLearner, epoch: u64, state: Option<&ModelState>) -> TxnOutcome {
        let mut reads = Vec::new();
        for (i, f) in learner.spec().features.iter().enumerate() {
            reads.push(ReadResult {
                key: weight_key(f).unwrap(),
                value: state.map(|s| Arc::new(ShardValue::Params(vec![s.weights[i]]))),
            });
        }
        reads.push(ReadResult {
            key: bias_key(),
            value: state.map(|s| Arc::new(ShardValue::Params(vec![s.bias]))),
        });
        reads.push(ReadResult {
            key: training_meta_key(),
            value: state.map(|s| Arc::new(ShardValue::Meta(s.meta.encode()))),
        });
        TxnOutcome {
            txn_id: 1,
            ts: 1,
            kind: TxnKind::Inference,
            status: TxnStatus::Committed { epoch },
            reads,
            latency_ns: 0,
        }
    }

    #[test]
    fn absent_keys_read_as_zero_model() {
        let learner =
            OnlineLearner::new(ModelSpec::new(ModelKind::Logistic, vec!["a".into(), "b".into()])).unwrap();
        let state = learner.model_from_reads(&fake_reads(&learner, 5, None)).unwrap();
        assert_eq!(state.weights, vec![0.0, 0.0]);
        assert_eq!(state.bias, 0.0);
        assert_eq!(state.meta, TrainingMeta::default());
    }

    #[test]
    fn train_step_packages_one_atomic_update() {
        let learner =
            OnlineLearner::new(ModelSpec::new(ModelKind::Logistic, vec!["a".into(), "b".into()])).unwrap();
        let step = learner.train_step(&fake_reads(&learner, 7, None), &[1.0, -1.0], 1.0).unwrap();
        assert_eq!(step.snapshot_epoch, 7);
        assert_eq!(step.prediction, 0.5);
        assert!(step.txn.validate().is_ok());
        assert_eq!(step.txn.kind, TxnKind::Update);
        assert_eq!(step.txn.ops.len(), 4);
        // Zero model, y=1: residual -0.5, deltas -eta*g = [0.05, -0.05], bias 0.05.
        match &step.txn.ops[0] {
            StateOp::Apply { key, delta } => {
                assert_eq!(key, &weight_key("a").unwrap());
                assert!((delta[0] - 0.05).abs() < 1e-15);
            }
            other => panic!("expected apply, got {other:?}"),
        }
        match &step.txn.ops[2] {
            StateOp::Apply { key, delta } => {
                assert_eq!(key, &bias_key());
                assert!((delta[0] - 0.05).abs() < 1e-15);
            }
            other => panic!("expected apply, got {other:?}"),
        }
        match &step.txn.ops[3] {
            StateOp::Write { key, value } => {
                assert_eq!(key, &training_meta_key());
                let meta = match value {
                    ShardValue::Meta(b) => TrainingMeta::decode(b).unwrap(),
                    other => panic!("expected meta value, got {other:?}"),
                };
                assert_eq!(meta.examples_seen, 1);
                assert!((meta.cumulative_loss - step.loss).abs() < 1e-15);
            }
            other => panic!("expected write, got {other:?}"),
        }
    }

    #[test]
    fn staleness_is_commit_minus_snapshot_epoch() {
        let mut learner =
            OnlineLearner::new(ModelSpec::new(ModelKind::Linear, vec!["a".into()])).unwrap();
        learner.record_submitted(7, 4);
        let outcome = TxnOutcome {
            txn_id: 7,
            ts: 7,
            kind: TxnKind::Update,
            status: TxnStatus::Committed { epoch: 9 },
            reads: vec![],
            latency_ns: 0,
        };
        assert_eq!(learner.note_outcome(&outcome), Some(5));
        assert_eq!(learner.note_outcome(&outcome), None); // already drained
        assert_eq!(learner.pending_steps(), 0);
    }

    /// SGD on the packaged steps, driven without an engine: apply each
    /// step's deltas to a local copy of the model and check the classifier
    /// actually learns a separable problem. Validates the loop before any
    /// concurrency is involved.
    #[test]
    fn logistic_steps_converge_on_separable_data() {
        let w_star = [2.0, -3.0];
        let b_star = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let example = |rng: &mut ChaCha8Rng| {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let y = if raw_score(&w_star, b_star, &x) > 0.0 { 1.0 } else { 0.0 };
            (x, y)
        };
        let learner =
            OnlineLearner::new(ModelSpec::new(ModelKind::Logistic, vec!["x0".into(), "x1".into()])).unwrap();
        let mut state = ModelState { weights: vec![0.0, 0.0], bias: 0.0, meta: TrainingMeta::default() };
        for _ in 0..3000 {
            let (x, y) = example(&mut rng);
            let step = learner.train_step(&fake_reads(&learner, 1, Some(&state)), &x, y).unwrap();
            for (i, op) in step.txn.ops.iter().enumerate() {
                if let StateOp::Apply { delta, .. } = op {
                    if i < 2 {
                        state.weights[i] += delta[0];
                    } else {
                        state.bias += delta[0];
                    }
                }
            }
            state.meta.examples_seen += 1;
        }
        let mut correct = 0;
        for _ in 0..500 {
            let (x, y) = example(&mut rng);
            let p = predict(ModelKind::Logistic, &state.weights, state.bias, &x);
            if (p > 0.5) == (y > 0.5) {
                correct += 1;
            }
        }
        assert!(correct >= 475, "accuracy {correct}/500");
    }

    #[test]
    fn spec_validation_rejects_bad_configs() {
        assert!(OnlineLearner::new(ModelSpec::new(ModelKind::Linear, vec![])).is_err());
        assert!(
            OnlineLearner::new(ModelSpec::new(ModelKind::Linear, vec!["a".into(), "a".into()])).is_err()
        );
        let mut spec = ModelSpec::new(ModelKind::Linear, vec!["a".into()]);
        spec.learning_rate = 0.0;
        assert!(OnlineLearner::new(spec).is_err());
    }
}
