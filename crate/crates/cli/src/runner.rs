//! Drives benchmark runs: engine assembly, artifact files, inline
//! verification, and the input-rate ramp that finds the highest sustained
//! throughput under a delay target.

use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};

use streamgate_core::audit::LOG_KEY;
use streamgate_core::engine::{run_pipeline, EngineConfig, FrameSource, RunReport};
use streamgate_core::io::Frame;
use streamgate_core::verify::{VerdictReport, Verifier};

use crate::bench::{BenchSpec, GenSource};
use crate::metrics;

/// Runs one benchmark with the in-process generator.
pub fn run_benchmark(spec: &BenchSpec, cfg: &EngineConfig) -> Result<RunReport> {
    let plan = spec.plan().context("compile pipeline")?;
    let source = GenSource::new(spec.clone(), cfg.variant.encrypted_source());
    let report = run_pipeline(&plan, cfg, Box::new(source)).context("run pipeline")?;
    Ok(report)
}

pub fn run_with_source(
    spec: &BenchSpec,
    cfg: &EngineConfig,
    source: Box<dyn FrameSource>,
) -> Result<RunReport> {
    let plan = spec.plan().context("compile pipeline")?;
    let report = run_pipeline(&plan, cfg, source).context("run pipeline")?;
    Ok(report)
}

/// Verifies a run's audit log against the benchmark's pipeline.
pub fn verify_report(spec: &BenchSpec, report: &RunReport) -> Result<VerdictReport> {
    let plan = spec.plan().context("compile pipeline")?;
    let verifier = Verifier::new(plan);
    verifier
        .verify_log(&report.log, &LOG_KEY)
        .map_err(|e| anyhow::anyhow!("audit log rejected: {}", e))
}

/// Writes metrics.csv, run.sbtlog, egress.bin, and optionally verdict.json.
pub fn write_artifacts(
    spec: &BenchSpec,
    variant: &str,
    report: &RunReport,
    verdict: Option<&VerdictReport>,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    metrics::write_metrics_csv(
        &out.join("metrics.csv"),
        &metrics::metrics_rows(spec, variant, report),
    )?;
    std::fs::write(out.join("run.sbtlog"), &report.log)?;
    metrics::write_egress_bin(&out.join("egress.bin"), &report.egress)?;
    if let Some(v) = verdict {
        std::fs::write(out.join("verdict.json"), serde_json::to_vec_pretty(v)?)?;
    }
    Ok(())
}

/// Paces a frame source to a target event rate.
pub struct RateLimited<S> {
    inner: S,
    events_per_sec: f64,
    emitted: u64,
    started: Option<Instant>,
    layout_size: usize,
}

impl<S: FrameSource> RateLimited<S> {
    pub fn new(inner: S, events_per_sec: f64, layout_size: usize) -> Self {
        RateLimited {
            inner,
            events_per_sec,
            emitted: 0,
            started: None,
            layout_size,
        }
    }
}

impl<S: FrameSource> FrameSource for RateLimited<S> {
    fn next_frame(&mut self) -> Option<(u8, Frame)> {
        let started = *self.started.get_or_insert_with(Instant::now);
        let due = Duration::from_secs_f64(self.emitted as f64 / self.events_per_sec);
        let elapsed = started.elapsed();
        if due > elapsed {
            std::thread::sleep(due - elapsed);
        }
        let (sid, frame) = self.inner.next_frame()?;
        // Watermark/end frames carry no events; encrypted payloads still
        // count by their plaintext event capacity, close enough for pacing.
        self.emitted += (frame.payload.len() / self.layout_size.max(1)) as u64;
        Some((sid, frame))
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SearchStep {
    pub rate_eps: f64,
    pub max_delay_us: u64,
    pub sustained: bool,
}

/// Stepwise input-rate ramp: doubles the offered rate until the output-delay
/// target is violated, reporting the last sustained rate.
pub fn search_throughput(
    spec: &BenchSpec,
    cfg: &EngineConfig,
    target_delay_us: u64,
    start_rate: f64,
) -> Result<(f64, Vec<SearchStep>)> {
    let mut rate = start_rate;
    let mut last_ok = 0.0;
    let mut steps = Vec::new();
    for _ in 0..8 {
        let source = RateLimited::new(
            GenSource::new(spec.clone(), cfg.variant.encrypted_source()),
            rate,
            spec.name.layout().item_size(),
        );
        let report = run_with_source(spec, cfg, Box::new(source))?;
        let max_delay = report
            .window_delays
            .iter()
            .map(|&(_, d)| d)
            .max()
            .unwrap_or(0);
        let sustained = max_delay <= target_delay_us && report.error.is_none();
        steps.push(SearchStep {
            rate_eps: rate,
            max_delay_us: max_delay,
            sustained,
        });
        if !sustained {
            break;
        }
        last_ok = rate;
        rate *= 2.0;
    }
    Ok((last_ok, steps))
}
