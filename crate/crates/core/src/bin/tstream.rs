//! Workbench CLI: generate traces, replay them against the engine, run the
//! single-threaded reference for comparison, and drill crash recovery.
//!
//! Logging goes through TSTREAM_LOG (same syntax as RUST_LOG). Exit code is
//! zero only when the requested command, including any verification it
//! implies, succeeded.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tstream_core::engine::EngineConfig;
use tstream_core::harness::{
    generate, oracle_events, run_events, run_with_crash, Arrival, RunOptions, Scenario,
    WorkloadSpec,
};
use tstream_core::ingest::trace::{read_trace, write_trace};
use tstream_core::ingest::StreamEvent;
use tstream_core::store::StoreConfig;

#[derive(Parser)]
#[command(name = "tstream", version, about = "Transactional stream processing workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded workload trace file.
    Generate {
        #[command(flatten)]
        workload: WorkloadArgs,
        /// Destination trace file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a workload against the engine and report metrics.
    Run {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        engine: EngineArgs,
        /// "closed", "open", or "rate:<events per second>".
        #[arg(long, default_value = "open")]
        arrival: String,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also run the single-threaded reference and verify the final
        /// state dumps are byte-identical.
        #[arg(long)]
        check: bool,
    },
    /// Run the single-threaded reference executor and print its tallies.
    Oracle {
        #[command(flatten)]
        workload: WorkloadArgs,
    },
    /// Run to a log offset, crash, truncate the log there, recover, resume,
    /// and verify the final state matches an uninterrupted run.
    RecoverTest {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        engine: EngineArgs,
        /// Crash once the log reaches this many bytes.
        #[arg(long)]
        crash_at: u64,
    },
}

#[derive(Args)]
struct WorkloadArgs {
    /// Replay this trace file instead of generating one.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// "synthetic", "healthcare", or "traffic". Also applies when
    /// replaying a trace: it selects the pipeline and transaction mapping.
    #[arg(long, default_value = "synthetic")]
    scenario: String,
    #[arg(long, default_value_t = 10_000)]
    events: u64,
    #[arg(long, default_value_t = 64)]
    keys: u32,
    /// Key skew; 0 is uniform.
    #[arg(long, default_value_t = 0.8)]
    zipf: f64,
    /// Fraction of events that are updates rather than queries.
    #[arg(long, default_value_t = 0.8)]
    mix: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl WorkloadArgs {
    fn scenario(&self) -> anyhow::Result<Scenario> {
        Ok(Scenario::parse(&self.scenario)?)
    }

    fn spec(&self, arrival: Arrival) -> anyhow::Result<WorkloadSpec> {
        Ok(WorkloadSpec {
            scenario: self.scenario()?,
            events: self.events,
            keys: self.keys,
            zipf: self.zipf,
            update_mix: self.mix,
            seed: self.seed,
            arrival,
        })
    }

    fn load(&self, arrival: Arrival) -> anyhow::Result<Vec<StreamEvent>> {
        match &self.trace {
            Some(path) => {
                read_trace(path).with_context(|| format!("reading trace {}", path.display()))
            }
            None => Ok(generate(&self.spec(arrival)?)?),
        }
    }
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long, default_value_t = 4)]
    executors: u32,
    #[arg(long, default_value_t = 16)]
    partitions: u32,
    /// Seal an epoch at this many transactions.
    #[arg(long, default_value_t = 256)]
    batch_size: u32,
    /// ...or once the oldest admitted transaction has waited this long.
    #[arg(long, default_value_t = 5)]
    batch_timeout_ms: u64,
    #[arg(long, default_value_t = 16384)]
    max_pending: u32,
    /// Fsync the log every N epochs; 0 never syncs.
    #[arg(long, default_value_t = 1)]
    fsync_every: u32,
    /// Checkpoint every N epochs; 0 disables. Needs --data-dir.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u32,
    /// Directory for the log and checkpoints; omit to run volatile.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl EngineArgs {
    fn config(&self) -> EngineConfig {
        EngineConfig {
            store: StoreConfig { partitions: self.partitions, ..StoreConfig::default() },
            executors: self.executors,
            batch_max: self.batch_size,
            batch_timeout: std::time::Duration::from_millis(self.batch_timeout_ms),
            max_pending: self.max_pending,
            fsync_every: self.fsync_every,
            checkpoint_every: self.checkpoint_every,
            data_dir: self.data_dir.clone(),
            ..EngineConfig::default()
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
    Csv,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TSTREAM_LOG")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Generate { workload, out } => {
            if workload.trace.is_some() {
                bail!("generate writes a new trace; --trace makes no sense here");
            }
            let events = workload.load(Arrival::FixedRate { per_sec: 0 })?;
            write_trace(&out, &events)?;
            eprintln!("wrote {} events to {}", events.len(), out.display());
            Ok(())
        }
        Cmd::Run { workload, engine, arrival, report, out, check } => {
            let arrival = Arrival::parse(&arrival)?;
            let scenario = workload.scenario()?;
            let events = workload.load(arrival)?;
            let opts = RunOptions { scenario, arrival, engine: engine.config() };
            let run = run_events(&events, &opts)?;
            let rendered = match report {
                ReportFormat::Text => run.report.to_text(),
                ReportFormat::Json => run.report.to_json()?,
                ReportFormat::Csv => run.report.to_csv(),
            };
            match out {
                Some(path) => std::fs::write(&path, rendered)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => println!("{rendered}"),
            }
            eprintln!(
                "state: {} bytes, crc32c {:08x}",
                run.dump.len(),
                crc32c::crc32c(&run.dump)
            );
            if !run.report.reconciled {
                bail!("run did not reconcile: an outcome or an event went missing");
            }
            if check {
                let oracle = oracle_events(&events, scenario, None)?;
                if run.dump != oracle.dump {
                    bail!(
                        "engine state diverged from the reference ({} vs {} bytes)",
                        run.dump.len(),
                        oracle.dump.len()
                    );
                }
                eprintln!("reference check: states identical");
            }
            Ok(())
        }
        Cmd::Oracle { workload } => {
            let scenario = workload.scenario()?;
            let events = workload.load(Arrival::FixedRate { per_sec: 0 })?;
            let o = oracle_events(&events, scenario, None)?;
            println!("events               {}", events.len());
            println!("updates committed    {}", o.updates_committed);
            println!("updates rejected     {}", o.updates_rejected);
            println!("inference served     {}", o.inference_served);
            println!("examples skipped     {}", o.examples_skipped);
            println!("state bytes          {}", o.dump.len());
            println!("state crc32c         {:08x}", crc32c::crc32c(&o.dump));
            Ok(())
        }
        Cmd::RecoverTest { workload, engine, crash_at } => {
            let scenario = workload.scenario()?;
            let arrival = Arrival::FixedRate { per_sec: 0 };
            let events = workload.load(arrival)?;

            let baseline_cfg = EngineConfig {
                data_dir: None,
                checkpoint_every: 0,
                ..engine.config()
            };
            let baseline =
                run_events(&events, &RunOptions { scenario, arrival, engine: baseline_cfg })?;

            // The drill needs a real directory; conjure one if the caller
            // did not care where the files go.
            let scratch;
            let mut cfg = engine.config();
            if cfg.data_dir.is_none() {
                scratch = tempfile::tempdir().context("creating scratch data dir")?;
                cfg.data_dir = Some(scratch.path().to_path_buf());
            }
            let crash = run_with_crash(&events, &RunOptions { scenario, arrival, engine: cfg }, crash_at)?;

            println!("crashed at log byte  {crash_at}");
            println!("recovered epoch      {}", crash.recovered_epoch);
            println!("recovery took        {} ms", crash.recovery_ms);
            println!("resumed at event     {}", crash.resumed_at_event);
            println!("max recovered stamp  {}", crash.max_recovered_stamp);
            let same = crash.output.dump == baseline.dump;
            println!(
                "final state          {}",
                if same { "identical to uninterrupted run" } else { "DIVERGED" }
            );
            if !same {
                bail!("recovered state diverged from the uninterrupted run");
            }
            Ok(())
        }
    }
}
