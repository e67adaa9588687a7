//! Run metrics and artifact files: `metrics.csv` (long format: key, window,
//! value), `egress.bin` (decrypted window results), `run.sbtlog` (audit
//! blocks), `verdict.json`.

use std::io::Write;
use std::path::Path;

use streamgate_core::engine::{EgressCapture, RunReport};

use crate::bench::BenchSpec;

pub const EGRESS_MAGIC: [u8; 4] = *b"SGEG";

/// Rows of the metrics CSV for one run.
pub fn metrics_rows(spec: &BenchSpec, variant: &str, report: &RunReport) -> Vec<(String, Option<u64>, String)> {
    let mut rows: Vec<(String, Option<u64>, String)> = vec![
        ("bench".into(), None, spec.name.name().into()),
        ("variant".into(), None, variant.into()),
        ("seed".into(), None, spec.seed.to_string()),
        ("windows".into(), None, spec.windows.to_string()),
        (
            "events_per_window".into(),
            None,
            spec.events_per_window.to_string(),
        ),
        ("events_ingested".into(), None, report.events_ingested.to_string()),
        ("bytes_ingested".into(), None, report.bytes_ingested.to_string()),
        ("wall_us".into(), None, report.wall_us.to_string()),
        (
            "throughput_events_per_sec".into(),
            None,
            format!("{:.1}", report.throughput_eps),
        ),
        (
            "throughput_mb_per_sec".into(),
            None,
            format!("{:.3}", report.throughput_mbps),
        ),
        (
            "peak_resident_bytes".into(),
            None,
            report.peak_resident_bytes.to_string(),
        ),
        (
            "bytes_copied_ingress".into(),
            None,
            report.bytes_copied_ingress.to_string(),
        ),
        ("late_drops".into(), None, report.late_drops.to_string()),
        ("audit_records".into(), None, report.audit_records.to_string()),
        (
            "audit_records_per_sec".into(),
            None,
            format!("{:.1}", report.records_per_sec),
        ),
        (
            "audit_raw_bytes".into(),
            None,
            report.audit_raw_bytes.to_string(),
        ),
        ("audit_block_bytes".into(), None, report.block_bytes.to_string()),
        ("audit_blocks".into(), None, report.blocks.to_string()),
        (
            "compression_ratio".into(),
            None,
            format!("{:.3}", report.compression_ratio),
        ),
        (
            "audit_cpu_fraction".into(),
            None,
            format!("{:.5}", report.audit_cpu_fraction),
        ),
    ];
    if let Some(err) = &report.error {
        rows.push(("error".into(), None, err.clone()));
    }
    for (w, d) in &report.window_delays {
        rows.push(("output_delay_us".into(), Some(*w), d.to_string()));
    }
    for w in &report.pending_windows {
        rows.push(("pending_window".into(), Some(*w), "1".into()));
    }
    rows
}

pub fn write_metrics_csv(
    path: &Path,
    rows: &[(String, Option<u64>, String)],
) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "key,window,value")?;
    for (k, w, v) in rows {
        match w {
            Some(w) => writeln!(f, "{},{},{}", k, w, v)?,
            None => writeln!(f, "{},,{}", k, v)?,
        }
    }
    Ok(())
}

/// Writes decrypted egress payloads: magic, then per window a u64 LE window
/// index, u32 LE length, payload.
pub fn write_egress_bin(path: &Path, egress: &[EgressCapture]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&EGRESS_MAGIC)?;
    for e in egress {
        f.write_all(&e.window.to_le_bytes())?;
        f.write_all(&(e.payload.len() as u32).to_le_bytes())?;
        f.write_all(&e.payload)?;
    }
    Ok(())
}

pub fn read_egress_bin(bytes: &[u8]) -> std::io::Result<Vec<EgressCapture>> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    if bytes.len() < 4 || bytes[..4] != EGRESS_MAGIC {
        return Err(bad("bad egress magic"));
    }
    let mut pos = 4usize;
    let mut out = Vec::new();
    while pos < bytes.len() {
        if pos + 12 > bytes.len() {
            return Err(bad("truncated egress entry"));
        }
        let window = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        let len = u32::from_le_bytes(bytes[pos + 8..pos + 12].try_into().unwrap()) as usize;
        pos += 12;
        if pos + len > bytes.len() {
            return Err(bad("truncated egress payload"));
        }
        out.push(EgressCapture {
            window,
            payload: bytes[pos..pos + len].to_vec(),
        });
        pos += len;
    }
    Ok(out)
}
