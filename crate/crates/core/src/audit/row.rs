//! Normative row encoding of audit records: the in-memory staging format and
//! the raw baseline that compression ratios are measured against. Fixed-width
//! little-endian fields behind a kind byte and a presence-flag byte; layout
//! in `docs/formats.md`.

use super::{AuditRecord, RecordKind};
use crate::model::PrimOp;

const F_WINDOW: u8 = 1 << 0;
const F_WATERMARK: u8 = 1 << 1;
const F_DIGEST: u8 = 1 << 2;
const F_SOURCE: u8 = 1 << 3;
const F_CODE: u8 = 1 << 4;

pub fn row_size(r: &AuditRecord) -> usize {
    let mut n = 1 + 1 + 8 + 1 + 4 + 2 + 2; // kind, flags, ts, op, count, n_in, n_out
    n += 8 * (r.inputs.len() + r.outputs.len());
    if r.window_no.is_some() {
        n += 8;
    }
    if r.watermark_value.is_some() {
        n += 8;
    }
    if r.hint_digest.is_some() {
        n += 4;
    }
    if r.source.is_some() {
        n += 1;
    }
    if r.code.is_some() {
        n += 1;
    }
    n
}

pub fn encode_record_row(r: &AuditRecord, out: &mut Vec<u8>) {
    let mut flags = 0u8;
    if r.window_no.is_some() {
        flags |= F_WINDOW;
    }
    if r.watermark_value.is_some() {
        flags |= F_WATERMARK;
    }
    if r.hint_digest.is_some() {
        flags |= F_DIGEST;
    }
    if r.source.is_some() {
        flags |= F_SOURCE;
    }
    if r.code.is_some() {
        flags |= F_CODE;
    }
    out.push(r.kind.code());
    out.push(flags);
    out.extend_from_slice(&r.ts.to_le_bytes());
    out.push(r.op.map(|o| o.code()).unwrap_or(0xFF));
    out.extend_from_slice(&(r.count as u32).to_le_bytes());
    out.extend_from_slice(&(r.inputs.len() as u16).to_le_bytes());
    out.extend_from_slice(&(r.outputs.len() as u16).to_le_bytes());
    for id in &r.inputs {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for id in &r.outputs {
        out.extend_from_slice(&id.to_le_bytes());
    }
    if let Some(w) = r.window_no {
        out.extend_from_slice(&w.to_le_bytes());
    }
    if let Some(v) = r.watermark_value {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(d) = r.hint_digest {
        out.extend_from_slice(&d.to_le_bytes());
    }
    if let Some(s) = r.source {
        out.push(s);
    }
    if let Some(c) = r.code {
        out.push(c);
    }
}

pub fn decode_record_row(buf: &[u8], pos: &mut usize) -> Option<AuditRecord> {
    let take = |pos: &mut usize, n: usize| -> Option<&[u8]> {
        let s = buf.get(*pos..*pos + n)?;
        *pos += n;
        Some(s)
    };
    let kind = RecordKind::from_code(take(pos, 1)?[0])?;
    let flags = take(pos, 1)?[0];
    let ts = u64::from_le_bytes(take(pos, 8)?.try_into().unwrap());
    let op_code = take(pos, 1)?[0];
    let op = if op_code == 0xFF {
        None
    } else {
        Some(PrimOp::from_code(op_code)?)
    };
    let count = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as u64;
    let n_in = u16::from_le_bytes(take(pos, 2)?.try_into().unwrap()) as usize;
    let n_out = u16::from_le_bytes(take(pos, 2)?.try_into().unwrap()) as usize;
    let mut inputs = Vec::with_capacity(n_in);
    for _ in 0..n_in {
        inputs.push(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
    }
    let mut outputs = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        outputs.push(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
    }
    let window_no = if flags & F_WINDOW != 0 {
        Some(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    } else {
        None
    };
    let watermark_value = if flags & F_WATERMARK != 0 {
        Some(i64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    } else {
        None
    };
    let hint_digest = if flags & F_DIGEST != 0 {
        Some(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    } else {
        None
    };
    let source = if flags & F_SOURCE != 0 {
        Some(take(pos, 1)?[0])
    } else {
        None
    };
    let code = if flags & F_CODE != 0 {
        Some(take(pos, 1)?[0])
    } else {
        None
    };
    Some(AuditRecord {
        ts,
        kind,
        op,
        inputs,
        outputs,
        window_no,
        count,
        watermark_value,
        hint_digest,
        source,
        code,
    })
}
