//! Audit records generated at the gate boundary, the in-memory record log,
//! and periodic flushing into authenticated columnar blocks.

mod codec;
mod huffman;
mod row;

pub use codec::{decode_columnar, encode_columnar, CodecError};
pub use row::{decode_record_row, encode_record_row, row_size};

use std::collections::HashSet;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::model::PrimOp;

/// Static edge-cloud key fixture for block authentication (and optional
/// block encryption). Key provisioning is out of scope.
pub const LOG_KEY: [u8; 32] = *b"edge-cloud-attestation-log-key!!";

pub const REJECT_REF_INVALID: u8 = 1;
pub const REJECT_PARAM_INVALID: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum RecordKind {
    Ingress,
    Egress,
    Exec,
    Wnd,
    Drop,
    Reject,
}

impl RecordKind {
    pub fn code(self) -> u8 {
        match self {
            RecordKind::Ingress => 0,
            RecordKind::Egress => 1,
            RecordKind::Exec => 2,
            RecordKind::Wnd => 3,
            RecordKind::Drop => 4,
            RecordKind::Reject => 5,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => RecordKind::Ingress,
            1 => RecordKind::Egress,
            2 => RecordKind::Exec,
            3 => RecordKind::Wnd,
            4 => RecordKind::Drop,
            5 => RecordKind::Reject,
            _ => return None,
        })
    }
}

/// One unit of attestation evidence. Ids are the data plane's monotonically
/// increasing uArray identifiers, never opaque tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    /// Processing-time microseconds.
    pub ts: u64,
    pub kind: RecordKind,
    pub op: Option<PrimOp>,
    pub inputs: Vec<u64>,
    pub outputs: Vec<u64>,
    pub window_no: Option<u64>,
    /// Items moved: batch size at ingress, output items for executions,
    /// dropped items for drop records.
    pub count: u64,
    /// Event-time value for watermark ingress records.
    pub watermark_value: Option<i64>,
    /// Digest of the consumption hints attached to the request.
    pub hint_digest: Option<u32>,
    /// Source stream tag on ingress records.
    pub source: Option<u8>,
    /// Rejection reason on reject records.
    pub code: Option<u8>,
}

impl AuditRecord {
    fn blank(kind: RecordKind, ts: u64) -> Self {
        AuditRecord {
            ts,
            kind,
            op: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            window_no: None,
            count: 0,
            watermark_value: None,
            hint_digest: None,
            source: None,
            code: None,
        }
    }

    pub fn ingress(ts: u64, id: u64, count: u64, source: u8) -> Self {
        AuditRecord {
            outputs: vec![id],
            count,
            source: Some(source),
            ..Self::blank(RecordKind::Ingress, ts)
        }
    }

    pub fn ingress_watermark(ts: u64, id: u64, value: i64, source: u8) -> Self {
        AuditRecord {
            outputs: vec![id],
            watermark_value: Some(value),
            source: Some(source),
            ..Self::blank(RecordKind::Ingress, ts)
        }
    }

    pub fn egress(ts: u64, id: u64, count: u64) -> Self {
        AuditRecord {
            inputs: vec![id],
            count,
            ..Self::blank(RecordKind::Egress, ts)
        }
    }
}

/// Append-order record log. Sequence numbers are dense and increasing; the
/// total order of records is append order, not timestamp order.
pub struct RecordLog {
    buf: Mutex<LogBuf>,
    next_seq: AtomicU64,
    raw_bytes: AtomicU64,
    total_records: AtomicU64,
    /// Nanoseconds spent producing/appending records, for overhead metrics.
    append_nanos: AtomicU64,
}

struct LogBuf {
    records: Vec<AuditRecord>,
    egress_pending: bool,
    #[cfg(debug_assertions)]
    introduced: HashSet<u64>,
}

impl Default for RecordLog {
    fn default() -> Self {
        Self::new()
    }
}

impl RecordLog {
    pub fn new() -> Self {
        RecordLog {
            buf: Mutex::new(LogBuf {
                records: Vec::new(),
                egress_pending: false,
                #[cfg(debug_assertions)]
                introduced: HashSet::new(),
            }),
            next_seq: AtomicU64::new(0),
            raw_bytes: AtomicU64::new(0),
            total_records: AtomicU64::new(0),
            append_nanos: AtomicU64::new(0),
        }
    }

    pub fn append(&self, r: AuditRecord) -> u64 {
        self.append_batch(vec![r])
    }

    /// Appends records produced by one gate invocation as a contiguous run.
    /// Returns the sequence number of the first record.
    pub fn append_batch(&self, records: Vec<AuditRecord>) -> u64 {
        let t0 = std::time::Instant::now();
        let mut raw = 0u64;
        for r in &records {
            raw += row_size(r) as u64;
        }
        let n = records.len() as u64;
        let mut buf = self.buf.lock().unwrap();
        #[cfg(debug_assertions)]
        for r in &records {
            for id in &r.inputs {
                debug_assert!(
                    buf.introduced.contains(id),
                    "record references id {:#x} never introduced",
                    id
                );
            }
            buf.introduced.extend(r.outputs.iter().copied());
        }
        buf.egress_pending |= records.iter().any(|r| r.kind == RecordKind::Egress);
        buf.records.extend(records);
        drop(buf);
        let seq = self.next_seq.fetch_add(n, Ordering::Relaxed);
        self.total_records.fetch_add(n, Ordering::Relaxed);
        self.raw_bytes.fetch_add(raw, Ordering::Relaxed);
        self.append_nanos
            .fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
        seq
    }

    pub fn buffered(&self) -> usize {
        self.buf.lock().unwrap().records.len()
    }

    pub fn total_records(&self) -> u64 {
        self.total_records.load(Ordering::Relaxed)
    }

    /// Total size of the normative row encoding of everything appended.
    pub fn raw_bytes(&self) -> u64 {
        self.raw_bytes.load(Ordering::Relaxed)
    }

    pub fn append_nanos(&self) -> u64 {
        self.append_nanos.load(Ordering::Relaxed)
    }

    fn drain(&self) -> (Vec<AuditRecord>, bool) {
        let mut buf = self.buf.lock().unwrap();
        let egress = buf.egress_pending;
        buf.egress_pending = false;
        (std::mem::take(&mut buf.records), egress)
    }
}

/// Encoded, authenticated block ready for upload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedBlock {
    pub bytes: Vec<u8>,
    pub record_count: usize,
}

/// Periodic flusher state. A block is emitted when at least `period_us` has
/// passed since the last flush, or as soon as an egress record is buffered.
pub struct BlockWriter {
    key: [u8; 32],
    encrypt: bool,
    period_us: u64,
    last_flush_us: u64,
    encode_nanos: AtomicU64,
    block_bytes: AtomicU64,
    blocks: AtomicU64,
}

impl BlockWriter {
    pub fn new(key: [u8; 32], encrypt: bool, period_us: u64) -> Self {
        BlockWriter {
            key,
            encrypt,
            period_us,
            last_flush_us: 0,
            encode_nanos: AtomicU64::new(0),
            block_bytes: AtomicU64::new(0),
            blocks: AtomicU64::new(0),
        }
    }

    pub fn flush_block(&mut self, now_us: u64, log: &RecordLog) -> Option<CompressedBlock> {
        let timer_due = now_us.saturating_sub(self.last_flush_us) >= self.period_us;
        {
            let buf = log.buf.lock().unwrap();
            if buf.records.is_empty() {
                return None;
            }
            if !timer_due && !buf.egress_pending {
                return None;
            }
        }
        let (records, _) = log.drain();
        if records.is_empty() {
            return None;
        }
        self.last_flush_us = now_us;
        let t0 = std::time::Instant::now();
        let block = encode_columnar(&records, &self.key, self.encrypt);
        self.encode_nanos
            .fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
        self.block_bytes
            .fetch_add(block.bytes.len() as u64, Ordering::Relaxed);
        self.blocks.fetch_add(1, Ordering::Relaxed);
        Some(block)
    }

    /// Unconditional final flush.
    pub fn flush_final(&mut self, now_us: u64, log: &RecordLog) -> Option<CompressedBlock> {
        self.last_flush_us = now_us;
        let (records, _) = log.drain();
        if records.is_empty() {
            return None;
        }
        let t0 = std::time::Instant::now();
        let block = encode_columnar(&records, &self.key, self.encrypt);
        self.encode_nanos
            .fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
        self.block_bytes
            .fetch_add(block.bytes.len() as u64, Ordering::Relaxed);
        self.blocks.fetch_add(1, Ordering::Relaxed);
        Some(block)
    }

    pub fn blocks_emitted(&self) -> u64 {
        self.blocks.load(Ordering::Relaxed)
    }

    pub fn block_bytes(&self) -> u64 {
        self.block_bytes.load(Ordering::Relaxed)
    }

    pub fn encode_nanos(&self) -> u64 {
        self.encode_nanos.load(Ordering::Relaxed)
    }
}

const ENVELOPE_MAGIC: [u8; 4] = *b"SBTL";

/// Writes one block in the `.sbtlog` stream envelope: magic, u32 LE length,
/// block bytes.
pub fn write_envelope<W: Write>(w: &mut W, block: &CompressedBlock) -> std::io::Result<()> {
    w.write_all(&ENVELOPE_MAGIC)?;
    w.write_all(&(block.bytes.len() as u32).to_le_bytes())?;
    w.write_all(&block.bytes)
}

/// Reads the next envelope; `Ok(None)` at clean end of stream.
pub fn read_envelope<R: Read>(r: &mut R) -> std::io::Result<Option<Vec<u8>>> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    if magic != ENVELOPE_MAGIC {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "bad block envelope magic",
        ));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut bytes)?;
    Ok(Some(bytes))
}

/// Decodes a whole `.sbtlog` byte stream into records, verifying every block.
pub fn decode_log_stream(bytes: &[u8], key: &[u8; 32]) -> Result<Vec<AuditRecord>, CodecError> {
    let mut cur = std::io::Cursor::new(bytes);
    let mut records = Vec::new();
    while let Some(block) = read_envelope(&mut cur).map_err(|_| CodecError::Corrupt)? {
        records.extend(decode_columnar(&block, key)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_numbers_dense_across_threads() {
        let log = std::sync::Arc::new(RecordLog::new());
        let mut handles = Vec::new();
        for t in 0..2 {
            let log = log.clone();
            handles.push(std::thread::spawn(move || {
                log.append(AuditRecord::ingress(t, 100 + t, 1, 0))
            }));
        }
        let mut seqs: Vec<u64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        seqs.sort_unstable();
        assert_eq!(seqs, vec![0, 1]);
        assert_eq!(log.buffered(), 2);
    }

    #[test]
    #[cfg(debug_assertions)]
    fn exec_referencing_unknown_id_asserts_in_debug() {
        let log = RecordLog::new();
        let mut rec = AuditRecord::blank(RecordKind::Exec, 5);
        rec.inputs = vec![0xAA];
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            log.append(rec);
        }));
        assert!(res.is_err());
    }

    #[test]
    fn flush_rules() {
        let log = RecordLog::new();
        let mut w = BlockWriter::new(LOG_KEY, false, 1_000_000);

        // Empty buffer, timer expired: nothing.
        assert!(w.flush_block(5_000_000, &log).is_none());

        // Egress pending flushes immediately even before the period.
        log.append(AuditRecord::ingress(1, 1, 10, 0));
        assert!(w.flush_block(5_000_100, &log).is_some());
        log.append(AuditRecord::egress(2, 1, 10));
        let b = w.flush_block(5_000_200, &log);
        assert!(b.is_some());
        assert_eq!(b.unwrap().record_count, 1);

        // Non-egress records wait for the period.
        log.append(AuditRecord::ingress(3, 2, 10, 0));
        assert!(w.flush_block(5_500_000, &log).is_none());
        assert!(w.flush_block(6_000_300, &log).is_some());
    }

    #[test]
    fn steady_rate_produces_about_one_block_per_period() {
        // 350 records/sec for 10 seconds at a 1 s flush period.
        let log = RecordLog::new();
        let mut w = BlockWriter::new(LOG_KEY, false, 1_000_000);
        let mut blocks = 0;
        let mut id = 1u64;
        for ms in 0..10_000u64 {
            if ms % 3 == 0 {
                log.append(AuditRecord::ingress(ms * 1000, id, 1, 0));
                id += 1;
            }
            // Poll the flusher every 50 ms of simulated time.
            if ms % 50 == 0 && w.flush_block(ms * 1000, &log).is_some() {
                blocks += 1;
            }
        }
        assert!((9..=11).contains(&blocks), "blocks = {}", blocks);
    }

    #[test]
    fn envelope_roundtrip() {
        let rec = AuditRecord::ingress(1, 1, 5, 0);
        let block = encode_columnar(&[rec.clone()], &LOG_KEY, false);
        let mut out = Vec::new();
        write_envelope(&mut out, &block).unwrap();
        write_envelope(&mut out, &block).unwrap();
        let records = decode_log_stream(&out, &LOG_KEY).unwrap();
        assert_eq!(records, vec![rec.clone(), rec]);
    }
}
