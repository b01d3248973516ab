//! Run measurement: counters, latency percentiles, staleness, formats.
//!
//! Latency is commit latency for updates (admission to epoch commit) and
//! serve latency for reads, both in nanoseconds off the engine's own
//! outcome records; refused transactions are not latency samples.
//! Staleness counts epochs between the snapshot a gradient was computed
//! against and the epoch its update committed, so it only has samples when
//! the workload actually closes that loop (the learner scenarios); for
//! pure counter workloads the histogram is legitimately empty.

use serde::{Deserialize, Serialize};

use crate::engine::EngineStats;
use crate::error::{Error, Result};
use crate::ingest::IngestCounters;

use super::{Arrival, Scenario};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: u64,
    pub p50_ns: u64,
    pub p95_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
    pub mean_ns: u64,
}

impl LatencySummary {
    /// Nearest-rank percentiles over the raw samples. Sorts in place.
    pub fn from_samples(samples: &mut [u64]) -> LatencySummary {
        if samples.is_empty() {
            return LatencySummary::default();
        }
        samples.sort_unstable();
        let n = samples.len();
        let rank = |q: f64| samples[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        let sum: u128 = samples.iter().map(|&v| v as u128).sum();
        LatencySummary {
            samples: n as u64,
            p50_ns: rank(0.50),
            p95_ns: rank(0.95),
            p99_ns: rank(0.99),
            max_ns: samples[n - 1],
            mean_ns: (sum / n as u128) as u64,
        }
    }
}

/// Power-of-two staleness buckets: 0, 1, 2-3, 4-7, 8-15, 16+ epochs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessHistogram {
    pub counts: [u64; 6],
    pub samples: u64,
    pub max: u64,
}

impl StalenessHistogram {
    pub const LABELS: [&'static str; 6] = ["0", "1", "2-3", "4-7", "8-15", "16+"];

    pub fn record(&mut self, staleness: u64) {
        let idx = match staleness {
            0 => 0,
            1 => 1,
            2..=3 => 2,
            4..=7 => 3,
            8..=15 => 4,
            _ => 5,
        };
        self.counts[idx] += 1;
        self.samples += 1;
        self.max = self.max.max(staleness);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub arrival: Arrival,
    pub executors: u32,
    /// Events offered to the ingest pipeline.
    pub events_offered: u64,
    pub ingest: IngestCounters,

    pub updates_submitted: u64,
    pub updates_committed: u64,
    pub updates_rejected_validation: u64,
    pub updates_rejected_backpressure: u64,
    pub updates_rejected_other: u64,
    pub inference_submitted: u64,
    pub inference_served: u64,
    pub inference_rejected: u64,
    pub examples_skipped: u64,
    pub predictions: u64,

    pub epochs_committed: u64,
    pub watermark: u64,
    pub wal_len: u64,

    pub wall_ms: u64,
    /// Committed updates plus served reads, per wall second.
    pub throughput_txn_s: f64,
    pub latency: LatencySummary,
    pub staleness: StalenessHistogram,
    /// Fraction of wall time each executor spent folding or installing.
    pub executor_busy: Vec<f64>,

    /// Set when the run went through a crash and recovery.
    pub recovery_ms: Option<u64>,
    pub recovered_epoch: Option<u64>,

    /// Both accounting equalities held exactly at the end of the run: the
    /// ingest bucket partition, and one outcome per submitted transaction.
    pub reconciled: bool,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("report encoding: {e}")))
    }

    /// Two-line CSV, one column per scalar; list-valued fields are packed
    /// with ';' so the row stays spreadsheet-safe.
    pub fn to_csv(&self) -> String {
        let mut cols: Vec<(&str, String)> = vec![
            ("scenario", self.scenario.name().to_string()),
            (
                "arrival",
                match self.arrival {
                    Arrival::ClosedLoop => "closed".to_string(),
                    Arrival::FixedRate { per_sec: 0 } => "open".to_string(),
                    Arrival::FixedRate { per_sec } => format!("rate:{per_sec}"),
                },
            ),
            ("executors", self.executors.to_string()),
            ("events_offered", self.events_offered.to_string()),
            ("ingested", self.ingest.ingested.to_string()),
            ("emitted_items", self.ingest.emitted_items.to_string()),
            ("emitted_events", self.ingest.emitted_events.to_string()),
            ("dropped_filtered", self.ingest.dropped_filtered.to_string()),
            ("dropped_malformed", self.ingest.dropped_malformed.to_string()),
            ("dropped_backpressure", self.ingest.dropped_backpressure.to_string()),
            ("ts_order_violations", self.ingest.ts_order_violations.to_string()),
            ("updates_submitted", self.updates_submitted.to_string()),
            ("updates_committed", self.updates_committed.to_string()),
            ("updates_rejected_validation", self.updates_rejected_validation.to_string()),
            ("updates_rejected_backpressure", self.updates_rejected_backpressure.to_string()),
            ("updates_rejected_other", self.updates_rejected_other.to_string()),
            ("inference_submitted", self.inference_submitted.to_string()),
            ("inference_served", self.inference_served.to_string()),
            ("inference_rejected", self.inference_rejected.to_string()),
            ("examples_skipped", self.examples_skipped.to_string()),
            ("predictions", self.predictions.to_string()),
            ("epochs_committed", self.epochs_committed.to_string()),
            ("watermark", self.watermark.to_string()),
            ("wal_len", self.wal_len.to_string()),
            ("wall_ms", self.wall_ms.to_string()),
            ("throughput_txn_s", format!("{:.1}", self.throughput_txn_s)),
            ("latency_samples", self.latency.samples.to_string()),
            ("latency_p50_ns", self.latency.p50_ns.to_string()),
            ("latency_p95_ns", self.latency.p95_ns.to_string()),
            ("latency_p99_ns", self.latency.p99_ns.to_string()),
            ("latency_max_ns", self.latency.max_ns.to_string()),
            ("latency_mean_ns", self.latency.mean_ns.to_string()),
            ("staleness_samples", self.staleness.samples.to_string()),
            ("staleness_max", self.staleness.max.to_string()),
            (
                "staleness_counts",
                self.staleness.counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
            ),
            (
                "executor_busy",
                self.executor_busy.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>().join(";"),
            ),
            ("recovery_ms", self.recovery_ms.map(|v| v.to_string()).unwrap_or_default()),
            ("recovered_epoch", self.recovered_epoch.map(|v| v.to_string()).unwrap_or_default()),
            ("reconciled", self.reconciled.to_string()),
        ];
        let header: Vec<&str> = cols.iter().map(|(k, _)| *k).collect();
        let row: Vec<String> = cols.drain(..).map(|(_, v)| v).collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }

    /// Aligned key/value text for terminals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(&format!("{k:<28} {v}\n"));
        };
        line("scenario", self.scenario.name().to_string());
        line("executors", self.executors.to_string());
        line("events offered", self.events_offered.to_string());
        line(
            "ingest",
            format!(
                "{} in / {} items out / {} dropped ({} filtered, {} malformed, {} backpressure)",
                self.ingest.ingested,
                self.ingest.emitted_items,
                self.ingest.dropped(),
                self.ingest.dropped_filtered,
                self.ingest.dropped_malformed,
                self.ingest.dropped_backpressure
            ),
        );
        line(
            "updates",
            format!(
                "{} submitted, {} committed, {} rejected",
                self.updates_submitted,
                self.updates_committed,
                self.updates_rejected_validation
                    + self.updates_rejected_backpressure
                    + self.updates_rejected_other
            ),
        );
        line(
            "reads",
            format!(
                "{} submitted, {} served, {} rejected",
                self.inference_submitted, self.inference_served, self.inference_rejected
            ),
        );
        line("epochs", format!("{} committed, watermark {}", self.epochs_committed, self.watermark));
        line("log bytes", self.wal_len.to_string());
        line("wall time", format!("{} ms", self.wall_ms));
        line("throughput", format!("{:.1} txn/s", self.throughput_txn_s));
        line(
            "latency ns (p50/p95/p99)",
            format!(
                "{} / {} / {} (max {}, n={})",
                self.latency.p50_ns,
                self.latency.p95_ns,
                self.latency.p99_ns,
                self.latency.max_ns,
                self.latency.samples
            ),
        );
        let stale = StalenessHistogram::LABELS
            .iter()
            .zip(self.staleness.counts.iter())
            .map(|(l, c)| format!("{l}:{c}"))
            .collect::<Vec<_>>()
            .join(" ");
        line("staleness epochs", format!("{stale} (n={})", self.staleness.samples));
        line(
            "executor busy",
            self.executor_busy.iter().map(|f| format!("{:.1}%", f * 100.0)).collect::<Vec<_>>().join(" "),
        );
        if let Some(ms) = self.recovery_ms {
            line("recovery", format!("{} ms to epoch {}", ms, self.recovered_epoch.unwrap_or(0)));
        }
        line("reconciled", self.reconciled.to_string());
        s
    }
}

/// Fill the engine-derived portion of a report.
pub(super) fn engine_section(report: &mut MetricsReport, stats: &EngineStats, wall_ms: u64) {
    report.epochs_committed = stats.epochs_committed;
    report.watermark = stats.watermark;
    report.wal_len = stats.wal_len;
    report.wall_ms = wall_ms;
    let done = report.updates_committed + report.inference_served;
    report.throughput_txn_s = if wall_ms == 0 { 0.0 } else { done as f64 * 1000.0 / wall_ms as f64 };
    let wall_ns = wall_ms as f64 * 1e6;
    report.executor_busy = stats
        .executor_busy_ns
        .iter()
        .map(|&ns| if wall_ns > 0.0 { (ns as f64 / wall_ns).min(1.0) } else { 0.0 })
        .collect();
}
