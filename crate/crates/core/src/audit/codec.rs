//! Columnar block codec. Records are split into columns and each column gets
//! the encoding its distribution wants: canonical Huffman for the kind+op
//! tag, list lengths, and item counts; delta + zigzag varint for timestamps,
//! uArray identifiers, and window numbers; presence bitmaps for optional
//! fields. Every block carries an HMAC-SHA256 tag over header and payload;
//! payload encryption (AES-128-GCM) is optional. Bit-exact layout in
//! `docs/formats.md`.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce};
use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use super::huffman;
use super::{AuditRecord, CompressedBlock, RecordKind};
use crate::model::PrimOp;
use crate::util::{get_varint, put_varint, unzigzag, zigzag};

const BLOCK_MAGIC: [u8; 4] = *b"SBTA";
const VERSION: u8 = 1;
const FLAG_ENCRYPTED: u8 = 1;
const TAG_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("block authentication failed")]
    AuthFail,
    #[error("block is corrupt")]
    Corrupt,
}

fn mac_tag(key: &[u8; 32], bytes: &[u8]) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).unwrap();
    mac.update(bytes);
    mac.finalize().into_bytes().into()
}

fn op_nibble(op: Option<PrimOp>) -> u8 {
    op.map(|o| o.code()).unwrap_or(0x0F)
}

fn delta_encode(values: &[u64], out: &mut Vec<u8>) -> u64 {
    let seed = values.first().copied().unwrap_or(0);
    let mut prev = seed;
    for &v in values {
        put_varint(out, zigzag(v.wrapping_sub(prev) as i64));
        prev = v;
    }
    seed
}

fn delta_decode(buf: &[u8], pos: &mut usize, n: usize, seed: u64) -> Option<Vec<u64>> {
    let mut out = Vec::with_capacity(n);
    let mut prev = seed;
    for _ in 0..n {
        let d = unzigzag(get_varint(buf, pos)?);
        prev = prev.wrapping_add(d as u64);
        out.push(prev);
    }
    Some(out)
}

fn put_bitmap(flags: &[bool], out: &mut Vec<u8>) {
    let mut byte = 0u8;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            out.push(byte);
            byte = 0;
        }
    }
    if flags.len() % 8 != 0 {
        out.push(byte);
    }
}

fn get_bitmap(buf: &[u8], pos: &mut usize, n: usize) -> Option<Vec<bool>> {
    let nbytes = n.div_ceil(8);
    let bytes = buf.get(*pos..*pos + nbytes)?;
    *pos += nbytes;
    Some((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

struct Columns {
    tags: Vec<u64>,
    n_in: Vec<u64>,
    n_out: Vec<u64>,
    counts: Vec<u64>,
    ts: Vec<u64>,
    in_ids: Vec<u64>,
    out_ids: Vec<u64>,
    window_vals: Vec<u64>,
    window_present: Vec<bool>,
    wm_vals: Vec<u64>,
    wm_present: Vec<bool>,
    digest_vals: Vec<u64>,
    digest_present: Vec<bool>,
    source_vals: Vec<u8>,
    source_present: Vec<bool>,
    code_vals: Vec<u8>,
    code_present: Vec<bool>,
}

fn split_columns(records: &[AuditRecord]) -> Columns {
    let n = records.len();
    let mut c = Columns {
        tags: Vec::with_capacity(n),
        n_in: Vec::with_capacity(n),
        n_out: Vec::with_capacity(n),
        counts: Vec::with_capacity(n),
        ts: Vec::with_capacity(n),
        in_ids: Vec::new(),
        out_ids: Vec::new(),
        window_vals: Vec::new(),
        window_present: Vec::with_capacity(n),
        wm_vals: Vec::new(),
        wm_present: Vec::with_capacity(n),
        digest_vals: Vec::new(),
        digest_present: Vec::with_capacity(n),
        source_vals: Vec::new(),
        source_present: Vec::with_capacity(n),
        code_vals: Vec::new(),
        code_present: Vec::with_capacity(n),
    };
    for r in records {
        c.tags
            .push(u64::from(r.kind.code() << 4 | op_nibble(r.op)));
        c.n_in.push(r.inputs.len() as u64);
        c.n_out.push(r.outputs.len() as u64);
        c.counts.push(r.count);
        c.ts.push(r.ts);
        c.in_ids.extend_from_slice(&r.inputs);
        c.out_ids.extend_from_slice(&r.outputs);
        c.window_present.push(r.window_no.is_some());
        if let Some(w) = r.window_no {
            c.window_vals.push(w);
        }
        c.wm_present.push(r.watermark_value.is_some());
        if let Some(v) = r.watermark_value {
            c.wm_vals.push(v as u64);
        }
        c.digest_present.push(r.hint_digest.is_some());
        if let Some(d) = r.hint_digest {
            c.digest_vals.push(u64::from(d));
        }
        c.source_present.push(r.source.is_some());
        if let Some(s) = r.source {
            c.source_vals.push(s);
        }
        c.code_present.push(r.code.is_some());
        if let Some(code) = r.code {
            c.code_vals.push(code);
        }
    }
    c
}

/// Encodes a record sequence into one authenticated block.
pub fn encode_columnar(records: &[AuditRecord], key: &[u8; 32], encrypt: bool) -> CompressedBlock {
    assert!(!records.is_empty(), "encode_columnar requires records");
    let c = split_columns(records);

    let mut payload = Vec::new();
    // Delta columns with their first-value seeds up front.
    let mut seeds = [0u64; 6];
    let mut delta_blobs = Vec::new();
    for (i, vals) in [
        &c.ts,
        &c.in_ids,
        &c.out_ids,
        &c.window_vals,
        &c.wm_vals,
        &c.digest_vals,
    ]
    .iter()
    .enumerate()
    {
        let mut blob = Vec::new();
        seeds[i] = delta_encode(vals, &mut blob);
        delta_blobs.push(blob);
    }
    for s in seeds {
        payload.extend_from_slice(&s.to_le_bytes());
    }

    huffman::encode_column(&c.tags, &mut payload);
    huffman::encode_column(&c.lens, &mut payload);
    huffman::encode_column(&c.counts, &mut payload);
    for blob in delta_blobs {
        put_varint(&mut payload, blob.len() as u64);
        payload.extend_from_slice(&blob);
    }
    put_bitmap(&c.window_present, &mut payload);
    put_bitmap(&c.wm_present, &mut payload);
    put_bitmap(&c.digest_present, &mut payload);
    put_bitmap(&c.source_present, &mut payload);
    put_bitmap(&c.code_present, &mut payload);
    huffman::encode_column(&c.digest_vals, &mut payload);
    huffman::encode_column(&c.source_vals, &mut payload);
    huffman::encode_column(&c.code_vals, &mut payload);

    let mut bytes = Vec::with_capacity(payload.len() + 64);
    bytes.extend_from_slice(&BLOCK_MAGIC);
    bytes.push(VERSION);
    bytes.push(if encrypt { FLAG_ENCRYPTED } else { 0 });
    put_varint(&mut bytes, records.len() as u64);
    if encrypt {
        let cipher = Aes128Gcm::new_from_slice(&key[..16]).unwrap();
        let mut nonce = [0u8; 12];
        nonce[..8].copy_from_slice(&records[0].ts.to_le_bytes());
        nonce[8..].copy_from_slice(&(records.len() as u32).to_le_bytes());
        let ct = cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: &payload,
                    aad: &[],
                },
            )
            .unwrap();
        bytes.extend_from_slice(&nonce);
        put_varint(&mut bytes, ct.len() as u64);
        bytes.extend_from_slice(&ct);
    } else {
        bytes.extend_from_slice(&payload);
    }
    let tag = mac_tag(key, &bytes);
    bytes.extend_from_slice(&tag);
    CompressedBlock {
        bytes,
        record_count: records.len(),
    }
}

/// Verifies and decodes one block back into the exact record sequence.
pub fn decode_columnar(bytes: &[u8], key: &[u8; 32]) -> Result<Vec<AuditRecord>, CodecError> {
    if bytes.len() < 4 + 1 + 1 + 1 + TAG_LEN {
        return Err(CodecError::Corrupt);
    }
    let (body, tag) = bytes.split_at(bytes.len() - TAG_LEN);
    let expect = mac_tag(key, body);
    // Constant-time-ish comparison.
    let mut diff = 0u8;
    for (a, b) in tag.iter().zip(expect.iter()) {
        diff |= a ^ b;
    }
    if diff != 0 {
        return Err(CodecError::AuthFail);
    }

    if body[0..4] != BLOCK_MAGIC || body[4] != VERSION {
        return Err(CodecError::Corrupt);
    }
    let flags = body[5];
    let mut pos = 6usize;
    let n = get_varint(body, &mut pos).ok_or(CodecError::Corrupt)? as usize;
    if n == 0 || n > 1 << 24 {
        return Err(CodecError::Corrupt);
    }

    let plain;
    let payload: &[u8] = if flags & FLAG_ENCRYPTED != 0 {
        let nonce = body.get(pos..pos + 12).ok_or(CodecError::Corrupt)?;
        pos += 12;
        let ct_len = get_varint(body, &mut pos).ok_or(CodecError::Corrupt)? as usize;
        let ct = body.get(pos..pos + ct_len).ok_or(CodecError::Corrupt)?;
        let cipher = Aes128Gcm::new_from_slice(&key[..16]).unwrap();
        plain = cipher
            .decrypt(
                Nonce::from_slice(nonce),
                Payload { msg: ct, aad: &[] },
            )
            .map_err(|_| CodecError::AuthFail)?;
        &plain
    } else {
        &body[pos..]
    };

    let mut p = 0usize;
    let mut seeds = [0u64; 6];
    for s in seeds.iter_mut() {
        let raw = payload.get(p..p + 8).ok_or(CodecError::Corrupt)?;
        *s = u64::from_le_bytes(raw.try_into().unwrap());
        p += 8;
    }

    let tags = huffman::decode_column(payload, &mut p, n).ok_or(CodecError::Corrupt)?;
    let n_in = huffman::decode_column(payload, &mut p, n).ok_or(CodecError::Corrupt)?;
    let n_out = huffman::decode_column(payload, &mut p, n).ok_or(CodecError::Corrupt)?;
    let counts = huffman::decode_column(payload, &mut p, n).ok_or(CodecError::Corrupt)?;

    let total_in: u64 = n_in.iter().sum();
    let total_out: u64 = n_out.iter().sum();
    if total_in > 1 << 28 || total_out > 1 << 28 {
        return Err(CodecError::Corrupt);
    }

    let mut delta_cols = Vec::new();
    for seed in seeds {
        let len = get_varint(payload, &mut p).ok_or(CodecError::Corrupt)? as usize;
        let blob = payload.get(p..p + len).ok_or(CodecError::Corrupt)?;
        p += len;
        delta_cols.push((blob, seed));
    }
    let parse_delta = |idx: usize, count: usize| -> Result<Vec<u64>, CodecError> {
        let (blob, seed) = delta_cols[idx];
        let mut bp = 0usize;
        let vals = delta_decode(blob, &mut bp, count, seed).ok_or(CodecError::Corrupt)?;
        if bp != blob.len() {
            return Err(CodecError::Corrupt);
        }
        Ok(vals)
    };
    let ts = parse_delta(0, n)?;
    let in_ids = parse_delta(1, total_in as usize)?;
    let out_ids = parse_delta(2, total_out as usize)?;

    let window_present = get_bitmap(payload, &mut p, n).ok_or(CodecError::Corrupt)?;
    let wm_present = get_bitmap(payload, &mut p, n).ok_or(CodecError::Corrupt)?;
    let digest_present = get_bitmap(payload, &mut p, n).ok_or(CodecError::Corrupt)?;
    let source_present = get_bitmap(payload, &mut p, n).ok_or(CodecError::Corrupt)?;
    let code_present = get_bitmap(payload, &mut p, n).ok_or(CodecError::Corrupt)?;

    let window_vals = parse_delta(3, window_present.iter().filter(|&&b| b).count())?;
    let wm_vals = parse_delta(4, wm_present.iter().filter(|&&b| b).count())?;
    let digest_vals = parse_delta(5, digest_present.iter().filter(|&&b| b).count())?;

    let n_sources = source_present.iter().filter(|&&b| b).count();
    let source_vals = payload.get(p..p + n_sources).ok_or(CodecError::Corrupt)?;
    p += n_sources;
    let n_codes = code_present.iter().filter(|&&b| b).count();
    let code_vals = payload.get(p..p + n_codes).ok_or(CodecError::Corrupt)?;
    p += n_codes;
    if p != payload.len() {
        return Err(CodecError::Corrupt);
    }

    let mut records = Vec::with_capacity(n);
    let (mut ii, mut oi, mut wi, mut mi, mut di, mut si, mut ci) = (0, 0, 0, 0, 0, 0, 0);
    for r in 0..n {
        let tag = tags[r];
        if tag > 0xFF {
            return Err(CodecError::Corrupt);
        }
        let kind = RecordKind::from_code((tag >> 4) as u8).ok_or(CodecError::Corrupt)?;
        let opn = (tag & 0x0F) as u8;
        let op = if opn == 0x0F {
            None
        } else {
            Some(PrimOp::from_code(opn).ok_or(CodecError::Corrupt)?)
        };
        let k_in = n_in[r] as usize;
        let k_out = n_out[r] as usize;
        let inputs = in_ids[ii..ii + k_in].to_vec();
        ii += k_in;
        let outputs = out_ids[oi..oi + k_out].to_vec();
        oi += k_out;
        let window_no = if window_present[r] {
            wi += 1;
            Some(window_vals[wi - 1])
        } else {
            None
        };
        let watermark_value = if wm_present[r] {
            mi += 1;
            Some(wm_vals[mi - 1] as i64)
        } else {
            None
        };
        let hint_digest = if digest_present[r] {
            di += 1;
            Some(digest_vals[di - 1] as u32)
        } else {
            None
        };
        let source = if source_present[r] {
            si += 1;
            Some(source_vals[si - 1])
        } else {
            None
        };
        let code = if code_present[r] {
            ci += 1;
            Some(code_vals[ci - 1])
        } else {
            None
        };
        records.push(AuditRecord {
            ts: ts[r],
            kind,
            op,
            inputs,
            outputs,
            window_no,
            count: counts[r],
            watermark_value,
            hint_digest,
            source,
            code,
        });
    }
    Ok(records)
}
