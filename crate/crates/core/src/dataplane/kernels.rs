//! The trusted primitive kernels: stateless, single-threaded, sequential
//! array algorithms. Every kernel is deterministic — fixed tie-breaks, fixed
//! accumulation order — so a replayed run is bit-identical regardless of
//! worker count.

use std::collections::BTreeMap;

use crate::model::{AggKind, Event, WindowSpec};

/// Sort order used everywhere: key, then event time, then input position.
/// Bottom-up merge sort over contiguous buffers; stability supplies the
/// input-position tie-break.
pub fn sort_events(events: &mut Vec<Event>) {
    let n = events.len();
    if n < 2 {
        return;
    }
    let mut src = std::mem::take(events);
    let mut dst = src.clone();
    let mut width = 1usize;
    while width < n {
        let mut lo = 0;
        while lo < n {
            let mid = (lo + width).min(n);
            let hi = (lo + 2 * width).min(n);
            merge_runs(&src[lo..mid], &src[mid..hi], &mut dst[lo..hi]);
            lo = hi;
        }
        std::mem::swap(&mut src, &mut dst);
        width *= 2;
    }
    *events = src;
}

#[inline]
fn event_le(a: &Event, b: &Event) -> bool {
    (a.key, a.event_time) <= (b.key, b.event_time)
}

fn merge_runs(a: &[Event], b: &[Event], out: &mut [Event]) {
    let (mut i, mut j) = (0, 0);
    for slot in out.iter_mut() {
        if i < a.len() && (j >= b.len() || event_le(&a[i], &b[j])) {
            *slot = a[i];
            i += 1;
        } else {
            *slot = b[j];
            j += 1;
        }
    }
}

pub fn is_sorted(events: &[Event]) -> bool {
    events.windows(2).all(|p| event_le(&p[0], &p[1]))
}

/// Cheap sortedness check for merge preconditions: all adjacent pairs for
/// small inputs, a strided sample otherwise.
pub fn sampled_sorted(events: &[Event]) -> bool {
    if events.len() <= 512 {
        return is_sorted(events);
    }
    let stride = events.len() / 256;
    (0..events.len() - 1)
        .step_by(stride.max(1))
        .all(|i| event_le(&events[i], &events[i + 1]))
}

/// N-way merge of sorted runs. Ties broken by run index, preserving the
/// argument-order stability of the two-run case.
pub fn merge_sorted(runs: &[Vec<Event>]) -> Vec<Event> {
    let total: usize = runs.iter().map(|r| r.len()).sum();
    let mut out = Vec::with_capacity(total);
    let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<(i32, i64, usize, usize)>> =
        runs.iter()
            .enumerate()
            .filter(|(_, r)| !r.is_empty())
            .map(|(ri, r)| std::cmp::Reverse((r[0].key, r[0].event_time, ri, 0)))
            .collect();
    while let Some(std::cmp::Reverse((_, _, ri, pos))) = heap.pop() {
        out.push(runs[ri][pos]);
        let next = pos + 1;
        if next < runs[ri].len() {
            let e = &runs[ri][next];
            heap.push(std::cmp::Reverse((e.key, e.event_time, ri, next)));
        }
    }
    out
}

/// Splits events into per-window runs; events older than the watermark are
/// dropped and counted. Windows come out in ascending index order.
pub fn segment(
    events: &[Event],
    spec: WindowSpec,
    watermark: i64,
) -> (BTreeMap<u64, Vec<Event>>, u64) {
    let mut windows: BTreeMap<u64, Vec<Event>> = BTreeMap::new();
    let mut late = 0u64;
    for e in events {
        if e.event_time < watermark {
            late += 1;
            continue;
        }
        let w = (e.event_time / spec.width_us) as u64;
        windows.entry(w).or_default().push(*e);
    }
    (windows, late)
}

/// Equi-join: all (key, left value, right value) combinations, ordered by
/// key, then left position, then right position.
pub fn join(left: &[Event], right: &[Event]) -> Vec<(i32, i32, i32)> {
    let mut li: Vec<usize> = (0..left.len()).collect();
    li.sort_by_key(|&i| (left[i].key, i));
    let mut ri: Vec<usize> = (0..right.len()).collect();
    ri.sort_by_key(|&i| (right[i].key, i));

    let mut out = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    while i < li.len() && j < ri.len() {
        let lk = left[li[i]].key;
        let rk = right[ri[j]].key;
        if lk < rk {
            i += 1;
        } else if lk > rk {
            j += 1;
        } else {
            let i_end = (i..li.len()).take_while(|&x| left[li[x]].key == lk).count() + i;
            let j_end = (j..ri.len()).take_while(|&x| right[ri[x]].key == rk).count() + j;
            for &lp in &li[i..i_end] {
                for &rp in &ri[j..j_end] {
                    out.push((lk, left[lp].value, right[rp].value));
                }
            }
            i = i_end;
            j = j_end;
        }
    }
    out
}

/// Per-key aggregate over a key-sorted event run.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupedAgg {
    /// sum or count per key.
    KeyI64(Vec<(i32, i64)>),
    KeySumCnt(Vec<(i32, i64, i64)>),
    /// avg per key (three-field input).
    KeyF64(Vec<(i32, f64)>),
    /// avg per key carrying the group's extra field (four-field input).
    KeyF64Ex(Vec<(i32, i32, f64)>),
    /// median per key.
    KeyI32(Vec<(i32, i32)>),
}

pub fn aggregate_grouped(events: &[Event], kind: AggKind, four_field: bool) -> GroupedAgg {
    debug_assert!(sampled_sorted(events), "grouped aggregate needs sorted input");
    let mut ki64 = Vec::new();
    let mut ksc = Vec::new();
    let mut kf64 = Vec::new();
    let mut kf64x = Vec::new();
    let mut ki32 = Vec::new();

    let mut i = 0usize;
    while i < events.len() {
        let key = events[i].key;
        let mut j = i;
        while j < events.len() && events[j].key == key {
            j += 1;
        }
        let run = &events[i..j];
        match kind {
            AggKind::Sum => {
                let s: i64 = run.iter().map(|e| i64::from(e.value)).sum();
                ki64.push((key, s));
            }
            AggKind::Count => ki64.push((key, run.len() as i64)),
            AggKind::Avg => {
                let s: i64 = run.iter().map(|e| i64::from(e.value)).sum();
                let avg = s as f64 / run.len() as f64;
                if four_field {
                    kf64x.push((key, run[0].extra, avg));
                } else {
                    kf64.push((key, avg));
                }
            }
            AggKind::Median => ki32.push((key, lower_median(run))),
            AggKind::SumCnt => {
                let s: i64 = run.iter().map(|e| i64::from(e.value)).sum();
                ksc.push((key, s, run.len() as i64));
            }
            AggKind::AboveAvgCount => unreachable!("handled by above_avg_count"),
        }
        i = j;
    }
    match kind {
        AggKind::Sum | AggKind::Count => GroupedAgg::KeyI64(ki64),
        AggKind::SumCnt => GroupedAgg::KeySumCnt(ksc),
        AggKind::Avg if four_field => GroupedAgg::KeyF64Ex(kf64x),
        AggKind::Avg => GroupedAgg::KeyF64(kf64),
        AggKind::Median => GroupedAgg::KeyI32(ki32),
        AggKind::AboveAvgCount => unreachable!(),
    }
}

fn lower_median(run: &[Event]) -> i32 {
    let mut vals: Vec<i32> = run.iter().map(|e| e.value).collect();
    vals.sort_unstable();
    vals[(vals.len() - 1) / 2]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GlobalAgg {
    I64(i64),
    F64(f64),
    I32(i32),
    I64I64(i64, i64),
}

/// Global aggregate over the concatenation of the inputs, in argument order.
/// Returns `None` for avg/median over an empty input.
pub fn aggregate_global(inputs: &[&[Event]], kind: AggKind) -> Option<GlobalAgg> {
    let n: usize = inputs.iter().map(|r| r.len()).sum();
    match kind {
        AggKind::Sum => Some(GlobalAgg::I64(
            inputs
                .iter()
                .flat_map(|r| r.iter())
                .map(|e| i64::from(e.value))
                .sum(),
        )),
        AggKind::Count => Some(GlobalAgg::I64(n as i64)),
        AggKind::Avg => {
            if n == 0 {
                return None;
            }
            let s: i64 = inputs
                .iter()
                .flat_map(|r| r.iter())
                .map(|e| i64::from(e.value))
                .sum();
            Some(GlobalAgg::F64(s as f64 / n as f64))
        }
        AggKind::Median => {
            if n == 0 {
                return None;
            }
            let mut vals: Vec<i32> = inputs
                .iter()
                .flat_map(|r| r.iter())
                .map(|e| e.value)
                .collect();
            vals.sort_unstable();
            Some(GlobalAgg::I32(vals[(vals.len() - 1) / 2]))
        }
        AggKind::SumCnt => {
            let s: i64 = inputs
                .iter()
                .flat_map(|r| r.iter())
                .map(|e| i64::from(e.value))
                .sum();
            Some(GlobalAgg::I64I64(s, n as i64))
        }
        AggKind::AboveAvgCount => None,
    }
}

/// Groups keyed averages by their carried extra field and counts, per group,
/// the keys whose average exceeds the mean of all key averages. Output is
/// ranked by count descending, group ascending. Groups where no key clears
/// the mean still appear, with count zero.
pub fn above_avg_count(rows: &[(i32, i32, f64)]) -> Vec<(i32, i64)> {
    if rows.is_empty() {
        return Vec::new();
    }
    let mean: f64 = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
    let mut counts: BTreeMap<i32, i64> = BTreeMap::new();
    for &(_, extra, avg) in rows {
        let c = counts.entry(extra).or_insert(0);
        if avg > mean {
            *c += 1;
        }
    }
    let mut out: Vec<(i32, i64)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// Per key, the k largest values in descending value order; ties go to the
/// earlier event time, then input position. Input must be key-sorted.
pub fn topk(events: &[Event], k: u32) -> Vec<Event> {
    debug_assert!(sampled_sorted(events), "topk needs sorted input");
    let mut out = Vec::new();
    let mut i = 0usize;
    while i < events.len() {
        let key = events[i].key;
        let mut j = i;
        while j < events.len() && events[j].key == key {
            j += 1;
        }
        let mut idx: Vec<usize> = (i..j).collect();
        idx.sort_by(|&a, &b| {
            events[b]
                .value
                .cmp(&events[a].value)
                .then(events[a].event_time.cmp(&events[b].event_time))
                .then(a.cmp(&b))
        });
        for &p in idx.iter().take(k as usize) {
            out.push(events[p]);
        }
        i = j;
    }
    out
}

/// Ascending distinct keys of a key-sorted run, plus their count.
pub fn unique(events: &[Event]) -> (Vec<i32>, u64) {
    debug_assert!(sampled_sorted(events), "unique needs sorted input");
    let mut keys = Vec::new();
    for e in events {
        if keys.last() != Some(&e.key) {
            keys.push(e.key);
        }
    }
    let n = keys.len() as u64;
    (keys, n)
}

/// Order-preserving band filter on the value field, inclusive on both ends.
pub fn filter_band(events: &[Event], lo: i32, hi: i32) -> Vec<Event> {
    events
        .iter()
        .filter(|e| (lo..=hi).contains(&e.value))
        .copied()
        .collect()
}

// Byte layouts for derived record schemas (little-endian, documented in
// docs/formats.md).

pub fn encode_key_i64(rows: &[(i32, i64)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows.len() * 12);
    for &(k, v) in rows {
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_key_i64(bytes: &[u8]) -> Vec<(i32, i64)> {
    bytes
        .chunks_exact(12)
        .map(|c| {
            (
                i32::from_le_bytes(c[0..4].try_into().unwrap()),
                i64::from_le_bytes(c[4..12].try_into().unwrap()),
            )
        })
        .collect()
}

pub fn encode_key_sumcnt(rows: &[(i32, i64, i64)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows.len() * 20);
    for &(k, s, c) in rows {
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&s.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

pub fn decode_key_sumcnt(bytes: &[u8]) -> Vec<(i32, i64, i64)> {
    bytes
        .chunks_exact(20)
        .map(|c| {
            (
                i32::from_le_bytes(c[0..4].try_into().unwrap()),
                i64::from_le_bytes(c[4..12].try_into().unwrap()),
                i64::from_le_bytes(c[12..20].try_into().unwrap()),
            )
        })
        .collect()
}

pub fn encode_key_f64(rows: &[(i32, f64)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows.len() * 12);
    for &(k, v) in rows {
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_key_f64(bytes: &[u8]) -> Vec<(i32, f64)> {
    bytes
        .chunks_exact(12)
        .map(|c| {
            (
                i32::from_le_bytes(c[0..4].try_into().unwrap()),
                f64::from_le_bytes(c[4..12].try_into().unwrap()),
            )
        })
        .collect()
}

pub fn encode_key_f64_ex(rows: &[(i32, i32, f64)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows.len() * 16);
    for &(k, x, v) in rows {
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_key_f64_ex(bytes: &[u8]) -> Vec<(i32, i32, f64)> {
    bytes
        .chunks_exact(16)
        .map(|c| {
            (
                i32::from_le_bytes(c[0..4].try_into().unwrap()),
                i32::from_le_bytes(c[4..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..16].try_into().unwrap()),
            )
        })
        .collect()
}

pub fn encode_key_i32(rows: &[(i32, i32)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows.len() * 8);
    for &(k, v) in rows {
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_i32s(vals: &[i32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_i32s(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn encode_join_rows(rows: &[(i32, i32, i32)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows.len() * 12);
    for &(k, l, r) in rows {
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&l.to_le_bytes());
        out.extend_from_slice(&r.to_le_bytes());
    }
    out
}

pub fn decode_join_rows(bytes: &[u8]) -> Vec<(i32, i32, i32)> {
    bytes
        .chunks_exact(12)
        .map(|c| {
            (
                i32::from_le_bytes(c[0..4].try_into().unwrap()),
                i32::from_le_bytes(c[4..8].try_into().unwrap()),
                i32::from_le_bytes(c[8..12].try_into().unwrap()),
            )
        })
        .collect()
}
