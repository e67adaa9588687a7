//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them on success).
//!
//! Criteria cover: the worked audit-trace example, verifier soundness under
//! record mutations, primitive-vs-oracle equivalence, audit-log compression
//! ratios, allocator invariants and hint efficacy, cross-variant and
//! worker-count result equality, gate+audit overhead, verifier replay rate,
//! and filter selectivity.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use streamgate_cli::bench::{BenchName, BenchSpec, ALL_BENCHES};
use streamgate_cli::{oracle, runner};
use streamgate_core::audit::{
    decode_columnar, decode_log_stream, encode_columnar, row_size, AuditRecord, RecordKind,
    LOG_KEY,
};
use streamgate_core::engine::{EngineConfig, RunReport, Variant};
use streamgate_core::mem::{AllocConfig, Allocator, ArrayKind, ArrayState};
use streamgate_core::model::{
    AggKind, Event, EventLayout, Operator, PipelineDecl, Plan, PrimOp, Schema, WindowSpec,
};
use streamgate_core::verify::{replay_throughput_selftest, Verifier};
use streamgate_core::dataplane::kernels;

fn pass(n: u32, name: &str) {
    println!("ACCEPTANCE {:02} {}: PASS", n, name);
}

fn cfg(variant: Variant, workers: usize, batch: usize) -> EngineConfig {
    EngineConfig {
        workers,
        batch_size: batch,
        variant,
        ..EngineConfig::default()
    }
}

fn run(spec: &BenchSpec, c: &EngineConfig) -> RunReport {
    let report = runner::run_benchmark(spec, c).expect("run");
    assert!(report.error.is_none(), "run aborted: {:?}", report.error);
    report
}

fn egress_map(report: &RunReport) -> BTreeMap<u64, Vec<u8>> {
    report
        .egress
        .iter()
        .map(|e| (e.window, e.payload.clone()))
        .collect()
}

fn grouped_sum_plan(width_us: i64) -> Plan {
    let decl = PipelineDecl::chain(&[
        Operator::Ingress,
        Operator::Window { width_us },
        Operator::GroupBy,
        Operator::Aggregation { kind: AggKind::Sum },
        Operator::Egress,
    ]);
    Plan::compile(&decl, EventLayout::ThreeField).unwrap()
}

/// Criterion 1: the worked seven-record audit trace replays to "window 0
/// complete with output delay 15, window 1 pending" — exact values.
#[test]
fn a01_worked_example_replay() {
    let exec = |ts, op, inputs: &[u64], out: u64, w, count| AuditRecord {
        ts,
        kind: if op == PrimOp::Segment {
            RecordKind::Wnd
        } else {
            RecordKind::Exec
        },
        op: Some(op),
        inputs: inputs.to_vec(),
        outputs: vec![out],
        window_no: Some(w),
        count,
        watermark_value: None,
        hint_digest: None,
        source: None,
        code: None,
    };
    // Batch 0xF0 is segmented into window 0 (0xF1) and window 1 (0xF6);
    // sort produces 0xF3; the watermark 0xF4 (value 100) closes window 0;
    // the sum over [0xF3, 0xF4] yields 0xF5, externalized at ts 30.
    let records = vec![
        AuditRecord::ingress(1, 0xF0, 10, 0),
        exec(5, PrimOp::Segment, &[0xF0], 0xF1, 0, 6),
        exec(10, PrimOp::Sort, &[0xF1], 0xF3, 0, 6),
        AuditRecord::ingress_watermark(15, 0xF4, 100, 0),
        exec(25, PrimOp::AggSum, &[0xF3, 0xF4], 0xF5, 0, 3),
        exec(28, PrimOp::Segment, &[0xF0], 0xF6, 1, 4),
        AuditRecord::egress(30, 0xF5, 3),
    ];

    let t0 = std::time::Instant::now();
    let verifier = Verifier::new(grouped_sum_plan(100));
    let verdict = verifier.verify_records(&records);
    assert!(verdict.pass, "{:?}", verdict.correctness.violations);
    assert_eq!(verdict.correctness.pending_windows, vec![1]);
    assert_eq!(verdict.freshness.delays.len(), 1);
    let d = &verdict.freshness.delays[0];
    assert_eq!(d.result_id, 0xF5);
    assert_eq!(d.window, Some(0));
    assert_eq!(d.delay_us, Some(15));
    assert!(t0.elapsed().as_secs() < 1);
    pass(1, "worked-example replay (delay 15, window 1 pending)");
}

/// Criterion 2: 1000+ single-record mutations across all six benchmarks all
/// fail verification; the unmutated streams all pass.
#[test]
fn a02_verifier_soundness_under_mutation() {
    let mut corpus = Vec::new();
    for name in ALL_BENCHES {
        let mut spec = BenchSpec::new(name);
        spec.windows = 3;
        spec.events_per_window = 4_000;
        spec.seed = 0xBEE5 + name as u64;
        let report = run(&spec, &cfg(Variant::Sbt, 2, 1_500));
        let records = decode_log_stream(&report.log, &LOG_KEY).unwrap();
        let verifier = Verifier::new(spec.plan().unwrap());
        let verdict = verifier.verify_records(&records);
        assert!(
            verdict.pass,
            "{:?} unmutated failed: {:?}",
            name, verdict.correctness.violations
        );
        corpus.push((name, verifier, records));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(0x50DA);
    let mut rejected = [0u64; 4];
    let mut applied = 0u64;
    while applied < 1_020 {
        let (name, verifier, records) = &corpus[rng.random_range(0..corpus.len())];
        let kind = rng.random_range(0..4usize);
        let mut mutated = records.clone();
        let changed = match kind {
            0 => {
                let i = rng.random_range(0..mutated.len());
                mutated.remove(i);
                true
            }
            1 => {
                let i = rng.random_range(0..mutated.len());
                let copy = mutated[i].clone();
                mutated.insert(i + 1, copy);
                true
            }
            2 => {
                // Substitute one id occurrence: half the time a random token,
                // half the time another id from the stream.
                let candidates: Vec<usize> = (0..mutated.len())
                    .filter(|&i| !mutated[i].inputs.is_empty() || !mutated[i].outputs.is_empty())
                    .collect();
                let i = candidates[rng.random_range(0..candidates.len())];
                let rec = &mut mutated[i];
                let n_in = rec.inputs.len();
                let slot = rng.random_range(0..n_in + rec.outputs.len());
                let target = if slot < n_in {
                    &mut rec.inputs[slot]
                } else {
                    &mut rec.outputs[slot - n_in]
                };
                let old = *target;
                let replacement = if rng.random::<bool>() {
                    rng.random::<u64>() | (1 << 63)
                } else {
                    let r = &records[rng.random_range(0..records.len())];
                    *r.outputs.first().or(r.inputs.first()).unwrap_or(&(1 << 62))
                };
                if replacement == old {
                    false
                } else {
                    *target = replacement;
                    true
                }
            }
            _ => {
                let candidates: Vec<usize> = (0..mutated.len())
                    .filter(|&i| mutated[i].window_no.is_some())
                    .collect();
                let i = candidates[rng.random_range(0..candidates.len())];
                let w = mutated[i].window_no.unwrap();
                mutated[i].window_no = Some(w + 1 + rng.random_range(0..4));
                true
            }
        };
        if !changed {
            continue;
        }
        applied += 1;
        let verdict = verifier.verify_records(&mutated);
        assert!(
            !verdict.pass,
            "{:?} mutation kind {} slipped through",
            name, kind
        );
        rejected[kind] += 1;
    }
    assert!(rejected.iter().all(|&n| n > 100));
    pass(
        2,
        &format!(
            "verifier soundness ({} mutations rejected: {} delete, {} duplicate, {} substitute, {} window)",
            applied, rejected[0], rejected[1], rejected[2], rejected[3]
        ),
    );
}

/// Criterion 3: every primitive matches an independent brute-force oracle on
/// 1000+ randomized inputs of up to 10K items.
#[test]
fn a03_primitive_oracle_equivalence() {
    let mut rng = ChaCha12Rng::seed_from_u64(0x0AC1E);
    let mut events = |n: usize, key_range: i32, rng: &mut ChaCha12Rng| -> Vec<Event> {
        (0..n)
            .map(|_| Event {
                event_time: rng.random_range(0..1_000_000),
                key: rng.random_range(0..key_range.max(1)),
                value: rng.random::<i32>() % 10_000,
                extra: rng.random_range(0..40),
            })
            .collect()
    };
    let size = |rng: &mut ChaCha12Rng| -> usize {
        match rng.random_range(0..20) {
            0 => 0,
            1 => 1,
            _ => rng.random_range(2..=10_000),
        }
    };
    let by_key_time = |a: &Event, b: &Event| (a.key, a.event_time).cmp(&(b.key, b.event_time));

    // Sort.
    for _ in 0..1_000 {
        let input = events(size(&mut rng), 64, &mut rng);
        let mut got = input.clone();
        kernels::sort_events(&mut got);
        let mut want = input;
        want.sort_by(by_key_time);
        assert_eq!(got, want);
    }

    // Merge.
    for _ in 0..1_000 {
        let k = rng.random_range(1..=8usize);
        let mut runs = Vec::new();
        let mut all = Vec::new();
        for _ in 0..k {
            let mut r = events(rng.random_range(0..=10_000 / k), 64, &mut rng);
            r.sort_by(by_key_time);
            all.extend(r.iter().copied());
            runs.push(r);
        }
        let got = kernels::merge_sorted(&runs);
        all.sort_by(by_key_time);
        // Same order on the sort key; ties may interleave differently but
        // multisets and sortedness must agree exactly per position key.
        assert_eq!(got.len(), all.len());
        assert!(kernels::is_sorted(&got));
        let ka: Vec<_> = got.iter().map(|e| (e.key, e.event_time)).collect();
        let kb: Vec<_> = all.iter().map(|e| (e.key, e.event_time)).collect();
        assert_eq!(ka, kb);
    }

    // The large fan-in shape: 128 sorted runs merged in one call.
    {
        let mut runs = Vec::new();
        let mut all = Vec::new();
        for _ in 0..128 {
            let mut r = events(1_000, i32::MAX, &mut rng);
            r.sort_by(by_key_time);
            all.extend(r.iter().copied());
            runs.push(r);
        }
        let got = kernels::merge_sorted(&runs);
        all.sort_by(by_key_time);
        let ka: Vec<_> = got.iter().map(|e| (e.key, e.event_time)).collect();
        let kb: Vec<_> = all.iter().map(|e| (e.key, e.event_time)).collect();
        assert_eq!(ka, kb);
    }

    // Segment.
    for _ in 0..1_000 {
        let input = events(size(&mut rng), 64, &mut rng);
        let width = rng.random_range(1_000..200_000);
        let wm = rng.random_range(0..500_000);
        let (got, late) = kernels::segment(&input, WindowSpec::new(width), wm);
        let mut want: BTreeMap<u64, Vec<Event>> = BTreeMap::new();
        let mut want_late = 0u64;
        for e in &input {
            if e.event_time < wm {
                want_late += 1;
            } else {
                want.entry((e.event_time / width) as u64).or_default().push(*e);
            }
        }
        assert_eq!(late, want_late);
        assert_eq!(got, want);
    }

    // Join against the quadratic nested-loop oracle.
    for i in 0..1_000 {
        let (nl, nr) = if i % 50 == 0 {
            (rng.random_range(0..=10_000), rng.random_range(0..=60))
        } else {
            (rng.random_range(0..=400), rng.random_range(0..=400))
        };
        let left = events(nl, 48, &mut rng);
        let right = events(nr, 48, &mut rng);
        let got = kernels::join(&left, &right);
        let mut ls: Vec<usize> = (0..left.len()).collect();
        ls.sort_by_key(|&i| (left[i].key, i));
        let mut rs: Vec<usize> = (0..right.len()).collect();
        rs.sort_by_key(|&i| (right[i].key, i));
        let mut want = Vec::new();
        for &li in &ls {
            for &ri in &rs {
                if left[li].key == right[ri].key {
                    want.push((left[li].key, left[li].value, right[ri].value));
                }
            }
        }
        want.sort_by_key(|&(k, _, _)| k);
        // The nested loop above iterates left-major; within a key its order
        // is (left rank, right rank), which a stable sort by key preserves.
        assert_eq!(got, want);
    }

    // Aggregate: all grouped kinds plus the global forms.
    for i in 0..1_200 {
        let mut input = events(size(&mut rng), 32, &mut rng);
        input.sort_by(by_key_time);
        let kind = [
            AggKind::Sum,
            AggKind::Count,
            AggKind::Avg,
            AggKind::Median,
            AggKind::SumCnt,
        ][i % 5];
        let mut groups: BTreeMap<i32, Vec<&Event>> = BTreeMap::new();
        for e in &input {
            groups.entry(e.key).or_default().push(e);
        }
        match kernels::aggregate_grouped(&input, kind, false) {
            kernels::GroupedAgg::KeyI64(rows) => {
                let want: Vec<(i32, i64)> = groups
                    .iter()
                    .map(|(k, es)| {
                        let v = if kind == AggKind::Count {
                            es.len() as i64
                        } else {
                            es.iter().map(|e| i64::from(e.value)).sum()
                        };
                        (*k, v)
                    })
                    .collect();
                assert_eq!(rows, want);
            }
            kernels::GroupedAgg::KeyF64(rows) => {
                let want: Vec<(i32, f64)> = groups
                    .iter()
                    .map(|(k, es)| {
                        let s: i64 = es.iter().map(|e| i64::from(e.value)).sum();
                        (*k, s as f64 / es.len() as f64)
                    })
                    .collect();
                assert_eq!(rows, want);
            }
            kernels::GroupedAgg::KeyI32(rows) => {
                let want: Vec<(i32, i32)> = groups
                    .iter()
                    .map(|(k, es)| {
                        let mut vals: Vec<i32> = es.iter().map(|e| e.value).collect();
                        vals.sort_unstable();
                        (*k, vals[(vals.len() - 1) / 2])
                    })
                    .collect();
                assert_eq!(rows, want);
            }
            kernels::GroupedAgg::KeySumCnt(rows) => {
                let want: Vec<(i32, i64, i64)> = groups
                    .iter()
                    .map(|(k, es)| {
                        let s: i64 = es.iter().map(|e| i64::from(e.value)).sum();
                        (*k, s, es.len() as i64)
                    })
                    .collect();
                assert_eq!(rows, want);
            }
            kernels::GroupedAgg::KeyF64Ex(_) => unreachable!(),
        }
        // Global form over the same input.
        let global = kernels::aggregate_global(&[&input], kind);
        match kind {
            AggKind::Sum => {
                let want: i64 = input.iter().map(|e| i64::from(e.value)).sum();
                assert_eq!(global, Some(kernels::GlobalAgg::I64(want)));
            }
            AggKind::Count => {
                assert_eq!(global, Some(kernels::GlobalAgg::I64(input.len() as i64)));
            }
            _ => {
                if input.is_empty() {
                    if matches!(kind, AggKind::Avg | AggKind::Median) {
                        assert_eq!(global, None);
                    }
                } else {
                    assert!(global.is_some());
                }
            }
        }
    }

    // Ranked above-average counting (the power-grid back end).
    for _ in 0..1_000 {
        let n = rng.random_range(0..=2_000);
        let rows: Vec<(i32, i32, f64)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(0..500),
                    rng.random_range(0..40),
                    f64::from(rng.random_range(0..10_000u32)) / 7.0,
                )
            })
            .collect();
        let got = kernels::above_avg_count(&rows);
        if rows.is_empty() {
            assert!(got.is_empty());
            continue;
        }
        let mean = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
        let mut houses: BTreeMap<i32, i64> = BTreeMap::new();
        for &(_, h, a) in &rows {
            let c = houses.entry(h).or_insert(0);
            if a > mean {
                *c += 1;
            }
        }
        let mut want: Vec<(i32, i64)> = houses.into_iter().collect();
        want.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        assert_eq!(got, want);
    }

    // TopK.
    for _ in 0..1_000 {
        let mut input = events(size(&mut rng), 16, &mut rng);
        input.sort_by(by_key_time);
        let k = rng.random_range(1..=8u32);
        let got = kernels::topk(&input, k);
        let mut want = Vec::new();
        let mut groups: BTreeMap<i32, Vec<(usize, &Event)>> = BTreeMap::new();
        for (i, e) in input.iter().enumerate() {
            groups.entry(e.key).or_default().push((i, e));
        }
        for (_, mut es) in groups {
            es.sort_by(|(ia, a), (ib, b)| {
                b.value
                    .cmp(&a.value)
                    .then(a.event_time.cmp(&b.event_time))
                    .then(ia.cmp(ib))
            });
            for (_, e) in es.into_iter().take(k as usize) {
                want.push(*e);
            }
        }
        assert_eq!(got, want);
    }

    // Unique.
    for _ in 0..1_000 {
        let mut input = events(size(&mut rng), 128, &mut rng);
        input.sort_by(by_key_time);
        let (keys, n) = kernels::unique(&input);
        let want: Vec<i32> = input
            .iter()
            .map(|e| e.key)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        assert_eq!(keys, want);
        assert_eq!(n as usize, want.len());
    }

    // Band filter.
    for _ in 0..1_000 {
        let input = events(size(&mut rng), 64, &mut rng);
        let a = rng.random::<i32>() % 8_000;
        let b = rng.random::<i32>() % 8_000;
        let (lo, hi) = (a.min(b), a.max(b));
        let got = kernels::filter_band(&input, lo, hi);
        let want: Vec<Event> = input
            .iter()
            .filter(|e| (lo..=hi).contains(&e.value))
            .copied()
            .collect();
        assert_eq!(got, want);
    }

    // Concat is byte-level flattening.
    for _ in 0..1_000 {
        let chunks: Vec<Vec<Event>> = (0..rng.random_range(1..8))
            .map(|_| events(rng.random_range(0..1_500), 64, &mut rng))
            .collect();
        let layout = EventLayout::ThreeField;
        let mut got = Vec::new();
        for c in &chunks {
            got.extend_from_slice(&layout.encode_all(c));
        }
        let flat: Vec<Event> = chunks.into_iter().flatten().collect();
        assert_eq!(got, layout.encode_all(&flat));
    }

    pass(3, "primitive oracle equivalence (1000+ cases per primitive)");
}

/// Criterion 4: columnar compression of real audit streams reaches 4x over
/// the raw row encoding and 1.5x the ratio of general-purpose deflate, with
/// a bit-exact roundtrip.
#[test]
fn a04_compression_ratios() {
    use flate2::write::DeflateEncoder;
    use flate2::Compression;
    use std::io::Write;

    for name in [BenchName::WinSum, BenchName::Power] {
        for batch in [10_000usize, 100_000] {
            let mut spec = BenchSpec::new(name);
            spec.windows = 25;
            spec.events_per_window = 100_000;
            spec.seed = 0xC0 + batch as u64;
            let report = run(&spec, &cfg(Variant::Sbt, 2, batch));
            let records = decode_log_stream(&report.log, &LOG_KEY).unwrap();
            assert!(records.len() > 200, "need a representative stream");

            let mut raw = Vec::new();
            for r in &records {
                streamgate_core::audit::encode_record_row(r, &mut raw);
            }
            let raw_len: usize = records.iter().map(row_size).sum();
            assert_eq!(raw.len(), raw_len);

            // Offline upload bundle: the whole stream as one block.
            let block = encode_columnar(&records, &LOG_KEY, false);
            let ratio = raw.len() as f64 / block.bytes.len() as f64;

            // Bit-exact roundtrip.
            let decoded = decode_columnar(&block.bytes, &LOG_KEY).unwrap();
            assert_eq!(decoded, records);
            assert_eq!(encode_columnar(&decoded, &LOG_KEY, false).bytes, block.bytes);

            let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&raw).unwrap();
            let deflated = enc.finish().unwrap();
            let deflate_ratio = raw.len() as f64 / deflated.len() as f64;

            println!(
                "  {} batch={}: {} records, raw {}B, columnar {:.2}x, deflate {:.2}x, advantage {:.2}x",
                name.name(),
                batch,
                records.len(),
                raw.len(),
                ratio,
                deflate_ratio,
                ratio / deflate_ratio
            );
            assert!(
                ratio >= 4.0,
                "{} batch={} ratio {:.2} below 4x",
                name.name(),
                batch,
                ratio
            );
            assert!(
                ratio >= 1.5 * deflate_ratio,
                "{} batch={} advantage {:.2} below 1.5x (deflate {:.2})",
                name.name(),
                batch,
                ratio / deflate_ratio,
                deflate_ratio
            );
        }
    }
    pass(4, "columnar compression >= 4x and >= 1.5x deflate, roundtrip exact");
}

/// Criterion 5: allocator invariants under a 100K+-operation randomized
/// workload, and hinted placement never uses more peak memory than unhinted
/// on the three grouped benchmarks.
#[test]
fn a05_allocator_properties_and_hint_efficacy() {
    // Randomized lifecycle workload on small chunks.
    let alloc = Allocator::new(AllocConfig {
        chunk_size: 16 * 1024,
        group_reserve: 8 * 1024 * 1024,
    });
    let schema = Schema::Events(EventLayout::ThreeField);
    let mut rng = ChaCha12Rng::seed_from_u64(0xF1C);
    let mut open = Vec::new();
    let mut sealed: Vec<(streamgate_core::mem::UArrayHandle, u64)> = Vec::new();
    let mut retired = Vec::new();
    let check = |alloc: &Allocator, sealed: &[(streamgate_core::mem::UArrayHandle, u64)]| {
        let stats = alloc.stats();
        assert!(stats.resident_bytes <= stats.reserved_bytes);
        for g in alloc.snapshot_groups() {
            let mut seen_open = false;
            for m in &g.members {
                assert!(!seen_open, "member after Open in group {}", g.id);
                seen_open |= m.state == ArrayState::Open;
                if m.state != ArrayState::Retired {
                    assert!(m.start >= g.reclaim_cursor, "prefix reclamation violated");
                }
            }
        }
        for (h, hash) in sealed {
            assert_eq!(h.content_hash().ok(), Some(*hash), "sealed bytes moved");
        }
    };
    for step in 0..110_000u64 {
        match rng.random_range(0..100) {
            0..=24 => {
                let pred = match rng.random_range(0..4) {
                    0 => sealed.last().map(|(h, _)| h.id()),
                    1 => retired.last().copied(),
                    2 => Some(rng.random::<u64>() | (1 << 60)),
                    _ => None,
                };
                open.push(
                    alloc
                        .create(ArrayKind::State, schema, Some(step % 5), pred)
                        .unwrap(),
                );
            }
            25..=54 => {
                if !open.is_empty() {
                    let i = rng.random_range(0..open.len());
                    let items = rng.random_range(1..150usize);
                    open[i].append_bytes(&vec![step as u8; items * 12]).unwrap();
                }
            }
            55..=74 => {
                if !open.is_empty() {
                    let i = rng.random_range(0..open.len());
                    let h = open.swap_remove(i);
                    h.seal().unwrap();
                    let hash = h.content_hash().unwrap();
                    sealed.push((h, hash));
                }
            }
            75..=92 => {
                if !sealed.is_empty() {
                    let i = rng.random_range(0..sealed.len());
                    let (h, _) = sealed.swap_remove(i);
                    retired.push(h.id());
                    h.retire().unwrap();
                }
            }
            _ => {
                alloc.reclaim();
            }
        }
        if step % 20_000 == 0 {
            check(&alloc, &sealed);
        }
    }
    check(&alloc, &sealed);

    // Hint efficacy on the grouped benchmarks: with consumption hints the
    // peak resident footprint never exceeds the unhinted run.
    for name in [BenchName::TopK, BenchName::Join, BenchName::Power] {
        let mut spec = BenchSpec::new(name);
        spec.windows = 5;
        spec.events_per_window = 20_000;
        spec.seed = 0xF19;
        let mut hinted_cfg = cfg(Variant::ClearIngress, 2, 2_000);
        hinted_cfg.hints = true;
        let mut unhinted_cfg = hinted_cfg.clone();
        unhinted_cfg.hints = false;
        let hinted = run(&spec, &hinted_cfg);
        let unhinted = run(&spec, &unhinted_cfg);
        // Hints must not change results.
        assert_eq!(egress_map(&hinted), egress_map(&unhinted));
        println!(
            "  {}: peak resident hinted {:.1} MiB vs unhinted {:.1} MiB",
            name.name(),
            hinted.peak_resident_bytes as f64 / (1024.0 * 1024.0),
            unhinted.peak_resident_bytes as f64 / (1024.0 * 1024.0),
        );
        assert!(
            hinted.peak_resident_bytes <= unhinted.peak_resident_bytes,
            "{}: hinted {} > unhinted {}",
            name.name(),
            hinted.peak_resident_bytes,
            unhinted.peak_resident_bytes
        );
    }
    pass(5, "allocator invariants (110K ops) and hint efficacy");
}

/// Criterion 6: all four engine variants produce byte-identical per-window
/// egress payloads on seeded input, for all six benchmarks.
#[test]
fn a06_cross_variant_equality() {
    for name in ALL_BENCHES {
        let mut spec = BenchSpec::new(name);
        spec.windows = 3;
        spec.events_per_window = 6_000;
        spec.seed = 0x6A + name as u64;
        let mut baseline: Option<BTreeMap<u64, Vec<u8>>> = None;
        for variant in [
            Variant::Sbt,
            Variant::ClearIngress,
            Variant::IoViaOs,
            Variant::Insecure,
        ] {
            let report = run(&spec, &cfg(variant, 4, 2_000));
            let map = egress_map(&report);
            assert!(!map.is_empty());
            match &baseline {
                None => baseline = Some(map),
                Some(b) => assert_eq!(&map, b, "{:?} differs under {:?}", name, variant),
            }
        }
    }
    pass(6, "cross-variant egress equality (6 benchmarks x 4 variants)");
}

/// Criterion 7: worker counts 1, 2, 4, 8 produce identical per-window egress
/// payloads.
#[test]
fn a07_worker_count_determinism() {
    for name in ALL_BENCHES {
        let mut spec = BenchSpec::new(name);
        spec.windows = 3;
        spec.events_per_window = 6_000;
        spec.seed = 0x7B + name as u64;
        let mut baseline: Option<BTreeMap<u64, Vec<u8>>> = None;
        for workers in [1usize, 2, 4, 8] {
            let report = run(&spec, &cfg(Variant::Sbt, workers, 1_500));
            let map = egress_map(&report);
            match &baseline {
                None => baseline = Some(map),
                Some(b) => assert_eq!(&map, b, "{:?} differs at {} workers", name, workers),
            }
        }
    }
    pass(7, "worker-count determinism (1, 2, 4, 8)");
}

/// Criterion 8: gate + audit cost at 100K-event batches stays within 35%
/// throughput, and audit-record generation takes under 5% of worker CPU.
#[test]
fn a08_gate_and_audit_overhead() {
    let mut spec = BenchSpec::new(BenchName::WinSum);
    spec.windows = 12;
    spec.events_per_window = 100_000;
    spec.seed = 8;
    let secured = cfg(Variant::ClearIngress, 2, 100_000);
    let insecure = cfg(Variant::Insecure, 2, 100_000);

    // Warm-up, then interleaved measurement pairs; the median ratio damps
    // scheduler noise.
    let _ = run(&spec, &insecure);
    let mut ratios = Vec::new();
    let mut audit_fraction: f64 = 0.0;
    for _ in 0..3 {
        let base = run(&spec, &insecure);
        let sec = run(&spec, &secured);
        ratios.push(sec.throughput_eps / base.throughput_eps);
        audit_fraction = audit_fraction.max(sec.audit_cpu_fraction);
        println!(
            "  insecure {:.0} ev/s vs secured {:.0} ev/s ({:.1}% loss), audit cpu {:.2}%",
            base.throughput_eps,
            sec.throughput_eps,
            (1.0 - sec.throughput_eps / base.throughput_eps) * 100.0,
            sec.audit_cpu_fraction * 100.0
        );
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = ratios[ratios.len() / 2];
    assert!(
        median >= 0.65,
        "security overhead {:.1}% exceeds 35%",
        (1.0 - median) * 100.0
    );
    assert!(
        audit_fraction < 0.05,
        "audit generation used {:.2}% of worker time",
        audit_fraction * 100.0
    );
    pass(
        8,
        &format!(
            "gate+audit overhead {:.1}% (limit 35%), audit cpu {:.2}% (limit 5%)",
            (1.0 - median) * 100.0,
            audit_fraction * 100.0
        ),
    );
}

/// Criterion 9: single-threaded symbolic replay sustains at least 10K
/// records per second.
#[test]
fn a09_replay_rate() {
    let rate = replay_throughput_selftest(100_000);
    println!("  replay rate: {:.0} records/sec", rate);
    assert!(rate >= 10_000.0, "replay rate {:.0} below 10K/sec", rate);
    pass(9, &format!("verifier replay rate {:.0}/sec (limit 10K)", rate));
}

/// Criterion 10: a 1% band over 1M+ uniform values passes 0.8%–1.2% of the
/// input.
#[test]
fn a10_filter_selectivity() {
    let mut spec = BenchSpec::new(BenchName::Filter);
    spec.windows = 12;
    spec.events_per_window = 100_000;
    spec.seed = 10;
    let report = run(&spec, &cfg(Variant::Sbt, 2, 100_000));
    assert!(report.events_ingested >= 1_000_000);
    let passed: u64 = report
        .egress
        .iter()
        .map(|e| (e.payload.len() / EventLayout::ThreeField.item_size()) as u64)
        .sum();
    let fraction = passed as f64 / report.events_ingested as f64;
    println!(
        "  selectivity: {}/{} = {:.4}%",
        passed,
        report.events_ingested,
        fraction * 100.0
    );
    assert!(
        (0.008..=0.012).contains(&fraction),
        "selectivity {:.5} outside [0.8%, 1.2%]",
        fraction
    );
    pass(10, &format!("filter selectivity {:.3}%", fraction * 100.0));
}
