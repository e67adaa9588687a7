//! streamgate: run gated stream-analytics benchmarks and verify their audit
//! logs. See README.md and docs/formats.md for formats and examples.

use std::net::TcpListener;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use streamgate_cli::bench::{load_trace, BenchName, BenchSpec, GenSource};
use streamgate_cli::{metrics, net, runner};
use streamgate_core::audit::LOG_KEY;
use streamgate_core::engine::{EngineConfig, Variant};
use streamgate_core::mem::AllocConfig;
use streamgate_core::model::{parse_pipeline, EventLayout, Plan};
use streamgate_core::verify::{replay_throughput_selftest, Verifier};

#[derive(Parser)]
#[command(name = "streamgate", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a benchmark pipeline and write metrics and artifacts.
    Run(RunArgs),
    /// Verify an audit log against a pipeline.
    Verify(VerifyArgs),
    /// Validate a pipeline declaration file.
    Check {
        /// Pipeline declaration file.
        #[arg(long)]
        pipeline: PathBuf,
    },
    /// Measure single-threaded replay throughput on a synthetic stream.
    ReplaySelftest {
        #[arg(long, default_value_t = 100_000)]
        records: usize,
    },
    /// Generate a benchmark's frame stream and send it over TCP.
    Feed(FeedArgs),
    /// Stream an existing .sbtlog file to a listening verifier.
    SendLog {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        to: String,
    },
}

#[derive(Args)]
struct SpecArgs {
    /// Benchmark: topk | distinct | join | winsum | filter | power.
    #[arg(long, env = "STREAMGATE_BENCH")]
    bench: String,
    /// Events per window (full scale is 1M).
    #[arg(long, default_value_t = 100_000, env = "STREAMGATE_WINDOW_EVENTS")]
    window_events: u64,
    /// Number of event-time windows to generate.
    #[arg(long, default_value_t = 10)]
    windows: u64,
    /// Generator seed.
    #[arg(long, default_value_t = 1, env = "STREAMGATE_SEED")]
    seed: u64,
    /// k for the topk benchmark.
    #[arg(long, default_value_t = 10)]
    k: u32,
    /// Watermark cadence in windows.
    #[arg(long, default_value_t = 1)]
    wm_every: u64,
    /// Key trace file (one integer per line), e.g. taxi ids for distinct.
    #[arg(long)]
    key_trace: Option<PathBuf>,
    /// Value trace file (one integer per line), e.g. sensor readings.
    #[arg(long)]
    value_trace: Option<PathBuf>,
}

impl SpecArgs {
    fn build(&self) -> Result<BenchSpec> {
        let name = BenchName::parse(&self.bench)
            .with_context(|| format!("unknown benchmark `{}`", self.bench))?;
        let mut spec = BenchSpec::new(name);
        spec.windows = self.windows;
        spec.events_per_window = self.window_events;
        spec.seed = self.seed;
        spec.k = self.k;
        spec.wm_every = self.wm_every.max(1);
        if let Some(p) = &self.key_trace {
            spec.key_trace = Some(load_trace(p)?);
        }
        if let Some(p) = &self.value_trace {
            spec.value_trace = Some(load_trace(p)?);
        }
        Ok(spec)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Engine variant: sbt | clear-ingress | io-via-os | insecure.
    #[arg(long, default_value = "sbt", env = "STREAMGATE_VARIANT")]
    variant: String,
    /// Worker thread count.
    #[arg(long, default_value_t = 4, env = "STREAMGATE_WORKERS")]
    workers: usize,
    /// Events per ingestion batch.
    #[arg(long, default_value_t = 100_000, env = "STREAMGATE_BATCH")]
    batch: usize,
    /// Output-delay target in milliseconds (reported; with --search, the
    /// ramp stops when it is exceeded).
    #[arg(long)]
    delay_target: Option<u64>,
    /// Output directory for metrics.csv, run.sbtlog, egress.bin.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the verifier on the produced audit log.
    #[arg(long)]
    verify: bool,
    /// Disable consumption hints.
    #[arg(long)]
    no_hints: bool,
    /// Byte-copy marshaled requests across the gate.
    #[arg(long)]
    strict_gate: bool,
    /// Encrypt audit block payloads.
    #[arg(long)]
    encrypt_log: bool,
    /// Backpressure high-water mark in MiB.
    #[arg(long, default_value_t = 512)]
    backpressure_mib: u64,
    /// Accept the frame stream from one TCP connection instead of the
    /// in-process generator (single-source benchmarks only).
    #[arg(long)]
    ingest_tcp: Option<String>,
    /// Ramp the input rate until the delay target is violated.
    #[arg(long)]
    search: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Audit log file (.sbtlog).
    #[arg(long, conflicts_with = "listen")]
    log: Option<PathBuf>,
    /// Listen address for a streamed block log (one connection).
    #[arg(long)]
    listen: Option<String>,
    /// Benchmark whose pipeline to verify against.
    #[arg(long, conflicts_with = "pipeline")]
    bench: Option<String>,
    /// Pipeline declaration file to verify against.
    #[arg(long)]
    pipeline: Option<PathBuf>,
    /// Use the 16-byte four-field event layout with --pipeline.
    #[arg(long)]
    four_field: bool,
    /// Window width for --bench pipelines, microseconds.
    #[arg(long, default_value_t = 1_000_000)]
    width_us: i64,
    /// Treat the stream as a complete run (default) or a prefix.
    #[arg(long)]
    partial: bool,
    /// Write the verdict as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            2
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::Check { pipeline } => cmd_check(&pipeline),
        Cmd::ReplaySelftest { records } => {
            let rate = replay_throughput_selftest(records);
            println!("replayed {} records at {:.0} records/sec", records, rate);
            Ok(0)
        }
        Cmd::Feed(args) => cmd_feed(args),
        Cmd::SendLog { log, to } => {
            let bytes = std::fs::read(&log)?;
            net::send_log(&to, &bytes)?;
            println!("sent {} bytes to {}", bytes.len(), to);
            Ok(0)
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<i32> {
    let spec = args.spec.build()?;
    let variant = Variant::parse(&args.variant)
        .with_context(|| format!("unknown variant `{}`", args.variant))?;
    let cfg = EngineConfig {
        workers: args.workers,
        batch_size: args.batch,
        variant,
        strict_gate: args.strict_gate,
        hints: !args.no_hints,
        backpressure_high: args.backpressure_mib * 1024 * 1024,
        target_delay_us: args.delay_target.map(|ms| ms * 1000),
        alloc: AllocConfig::default(),
        encrypt_log: args.encrypt_log,
        flush_period_us: 1_000_000,
    };

    if args.search {
        let target = args
            .delay_target
            .context("--search requires --delay-target")?
            * 1000;
        let (sustained, steps) = runner::search_throughput(&spec, &cfg, target, 100_000.0)?;
        for s in &steps {
            println!(
                "rate {:>12.0} ev/s  max delay {:>9} us  {}",
                s.rate_eps,
                s.max_delay_us,
                if s.sustained { "sustained" } else { "violated" }
            );
        }
        println!("max sustained input rate: {:.0} events/sec", sustained);
        return Ok(0);
    }

    let report = if let Some(addr) = &args.ingest_tcp {
        if spec.name.sources() != 1 {
            bail!("--ingest-tcp supports single-source benchmarks only");
        }
        let listener = TcpListener::bind(addr)?;
        eprintln!("listening for frames on {}", addr);
        let source = net::TcpFrameSource::accept(&listener, variant.encrypted_source())?;
        runner::run_with_source(&spec, &cfg, Box::new(source))?
    } else {
        runner::run_benchmark(&spec, &cfg)?
    };

    let verdict = if args.verify {
        Some(runner::verify_report(&spec, &report)?)
    } else {
        None
    };

    println!(
        "{} [{}]: {} events in {:.3}s  ({:.0} ev/s, {:.2} MB/s)",
        spec.name.name(),
        variant.name(),
        report.events_ingested,
        report.wall_us as f64 / 1e6,
        report.throughput_eps,
        report.throughput_mbps,
    );
    println!(
        "  egress windows: {}  pending: {}  peak resident: {:.1} MiB  late drops: {}",
        report.egress.len(),
        report.pending_windows.len(),
        report.peak_resident_bytes as f64 / (1024.0 * 1024.0),
        report.late_drops,
    );
    if report.audit_records > 0 {
        println!(
            "  audit: {} records ({:.0}/s), {} blocks, compression {:.2}x, cpu {:.2}%",
            report.audit_records,
            report.records_per_sec,
            report.blocks,
            report.compression_ratio,
            report.audit_cpu_fraction * 100.0,
        );
    }
    if let Some(max) = report.window_delays.iter().map(|&(_, d)| d).max() {
        println!("  max output delay: {:.3} ms", max as f64 / 1000.0);
        if let Some(target) = cfg.target_delay_us {
            println!(
                "  delay target {} ms: {}",
                target / 1000,
                if max <= target { "met" } else { "exceeded" }
            );
        }
    }
    if let Some(v) = &verdict {
        println!(
            "  verify: {} ({} records, {} hint anomalies)",
            if v.pass { "pass" } else { "FAIL" },
            v.correctness.replayed_records,
            v.hint_anomalies,
        );
        for viol in &v.correctness.violations {
            println!("    violation: {}", viol);
        }
    }
    if let Some(err) = &report.error {
        println!("  run aborted: {}", err);
    }

    if let Some(out) = &args.out {
        runner::write_artifacts(&spec, variant.name(), &report, verdict.as_ref(), out)?;
        println!("  artifacts written to {}", out.display());
    }

    let failed = report.error.is_some() || verdict.as_ref().is_some_and(|v| !v.pass);
    Ok(if failed { 1 } else { 0 })
}

fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    let plan = if let Some(bench) = &args.bench {
        let name = BenchName::parse(bench).context("unknown benchmark")?;
        let mut spec = BenchSpec::new(name);
        spec.width_us = args.width_us;
        spec.plan()?
    } else if let Some(path) = &args.pipeline {
        let text = std::fs::read_to_string(path)?;
        let decl = parse_pipeline(&text).map_err(|e| anyhow::anyhow!(e))?;
        let layout = if args.four_field {
            EventLayout::FourField
        } else {
            EventLayout::ThreeField
        };
        Plan::compile(&decl, layout)?
    } else {
        bail!("verify needs --bench or --pipeline");
    };

    let log = if let Some(path) = &args.log {
        std::fs::read(path)?
    } else if let Some(addr) = &args.listen {
        let listener = TcpListener::bind(addr)?;
        eprintln!("listening for blocks on {}", addr);
        net::recv_log(&listener)?
    } else {
        bail!("verify needs --log or --listen");
    };

    let mut verifier = Verifier::new(plan);
    verifier.strict = !args.partial;
    let verdict = verifier
        .verify_log(&log, &LOG_KEY)
        .map_err(|e| anyhow::anyhow!("log rejected: {}", e))?;

    println!(
        "correctness: {}",
        if verdict.correctness.pass { "pass" } else { "FAIL" }
    );
    for v in &verdict.correctness.violations {
        println!("  violation: {}", v);
    }
    if !verdict.correctness.pending_windows.is_empty() {
        println!("  pending windows: {:?}", verdict.correctness.pending_windows);
    }
    println!(
        "freshness: {} egress results, {} unattributable",
        verdict.freshness.delays.len(),
        verdict.freshness.unattributable
    );
    for d in verdict.freshness.delays.iter().take(20) {
        match (d.window, d.delay_us) {
            (Some(w), Some(us)) => println!("  window {:>4}: delay {} us", w, us),
            (w, d) => println!("  window {:?}: delay {:?}", w, d),
        }
    }
    if verdict.freshness.delays.len() > 20 {
        println!("  ... {} more", verdict.freshness.delays.len() - 20);
    }
    if verdict.hint_anomalies > 0 {
        println!("hint anomalies: {}", verdict.hint_anomalies);
    }

    if let Some(path) = &args.json {
        std::fs::write(path, serde_json::to_vec_pretty(&verdict)?)?;
    }
    Ok(if verdict.pass { 0 } else { 1 })
}

fn cmd_check(path: &std::path::Path) -> Result<i32> {
    let text = std::fs::read_to_string(path)?;
    let decl = parse_pipeline(&text).map_err(|e| anyhow::anyhow!(e))?;
    let violations = decl.validate();
    if violations.is_empty() {
        println!(
            "ok: {} nodes, {} edges",
            decl.nodes.len(),
            decl.edges.len()
        );
        Ok(0)
    } else {
        for v in &violations {
            println!("violation: {}", v);
        }
        Ok(1)
    }
}

#[derive(Args)]
struct FeedArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Destination address of a `run --ingest-tcp` engine.
    #[arg(long)]
    to: String,
    /// Encrypt frames with the source-edge key.
    #[arg(long)]
    encrypt: bool,
}

fn cmd_feed(args: FeedArgs) -> Result<i32> {
    let spec = args.spec.build()?;
    if spec.name.sources() != 1 {
        bail!("feed supports single-source benchmarks only");
    }
    let mut source = GenSource::new(spec, args.encrypt);
    let (frames, bytes) = net::feed_frames(&args.to, &mut source)?;
    println!("fed {} frames ({} bytes) to {}", frames, bytes, args.to);
    Ok(0)
}

// Re-export for integration tests that exercise artifact parsing.
#[allow(unused_imports)]
use metrics::read_egress_bin as _read_egress_bin;
