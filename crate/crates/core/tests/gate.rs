//! Gate-boundary behavior: reference validation, rejection auditing, the
//! strict marshaling path, and the per-primitive contracts exercised through
//! the invoke entry.

use streamgate_core::audit::{decode_columnar, BlockWriter, RecordKind, LOG_KEY};
use streamgate_core::dataplane::{
    Gate, GateConfig, GateError, GateRequest, OpaqueRef, PrimParams, PrimitiveId, TokenSource,
};
use streamgate_core::io::{Frame, IngestPath, Ingested, IoGateway};
use streamgate_core::model::{AggKind, Event, EventLayout, PrimOp};

fn gate() -> Gate {
    Gate::init(GateConfig::default())
}

fn gateway() -> IoGateway {
    IoGateway::new(IngestPath::TrustedDirect, false, false)
}

fn ingest(gate: &Gate, io: &IoGateway, events: &[Event]) -> OpaqueRef {
    let frame = Frame::events(EventLayout::ThreeField.encode_all(events));
    match io
        .ingest_frame(gate, frame, EventLayout::ThreeField, 0, 1_000_000)
        .unwrap()
    {
        Ingested::Batches(b) => b[0].0,
        other => panic!("unexpected {:?}", other),
    }
}

fn ev(t: i64, k: i32, v: i32) -> Event {
    Event::new(t, k, v)
}

fn drain_records(gate: &Gate) -> Vec<streamgate_core::audit::AuditRecord> {
    let mut w = BlockWriter::new(LOG_KEY, false, 0);
    match w.flush_final(0, gate.log()) {
        Some(block) => decode_columnar(&block.bytes, &LOG_KEY).unwrap(),
        None => Vec::new(),
    }
}

#[test]
fn sort_orders_by_key() {
    let g = gate();
    let io = gateway();
    let input = ingest(&g, &io, &[ev(0, 3, 9), ev(1, 1, 7), ev(2, 2, 8)]);
    let resp = g
        .invoke(GateRequest::new(PrimitiveId::Sort, vec![input]))
        .unwrap();
    assert_eq!(resp.outputs.len(), 1);
    let eg = io.egress_emit(&g, resp.outputs[0].0).unwrap();
    let events = EventLayout::ThreeField.decode_all(&eg.open().unwrap());
    let kv: Vec<(i32, i32)> = events.iter().map(|e| (e.key, e.value)).collect();
    assert_eq!(kv, vec![(1, 7), (2, 8), (3, 9)]);
}

#[test]
fn fabricated_token_rejected_and_audited() {
    let g = gate();
    let err = g
        .invoke(GateRequest::new(
            PrimitiveId::Sort,
            vec![OpaqueRef(0xDEAD_BEEF)],
        ))
        .unwrap_err();
    assert_eq!(err, GateError::RefInvalid);
    let records = drain_records(&g);
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].kind, RecordKind::Reject);
    assert_eq!(records[0].code, Some(streamgate_core::audit::REJECT_REF_INVALID));
}

#[test]
fn random_tokens_always_rejected() {
    use rand::RngCore;
    let g = gate();
    let io = gateway();
    let live = ingest(&g, &io, &[ev(0, 1, 1)]);
    let mut rng = rand::rng();
    for _ in 0..2_000 {
        let t = rng.next_u64();
        if t == live.0 {
            continue;
        }
        let err = g
            .invoke(GateRequest::new(PrimitiveId::Sort, vec![OpaqueRef(t)]))
            .unwrap_err();
        assert_eq!(err, GateError::RefInvalid);
    }
}

#[test]
fn segment_splits_into_windows() {
    let g = gate();
    let io = gateway();
    let input = ingest(&g, &io, &[ev(200_000, 1, 1), ev(1_500_000, 2, 2)]);
    let mut req = GateRequest::new(PrimitiveId::Segment, vec![input]);
    req.params = PrimParams::Segment {
        width_us: 1_000_000,
        watermark: i64::MIN,
    };
    let resp = g.invoke(req).unwrap();
    let windows: Vec<Option<u64>> = resp.outputs.iter().map(|o| o.1).collect();
    assert_eq!(windows, vec![Some(0), Some(1)]);
}

#[test]
fn consumed_reference_becomes_invalid() {
    let g = gate();
    let io = gateway();
    let input = ingest(&g, &io, &[ev(0, 1, 1)]);
    g.invoke(GateRequest::new(PrimitiveId::Sort, vec![input]))
        .unwrap();
    // The sort consumed its input; the token is dead now.
    let err = g
        .invoke(GateRequest::new(PrimitiveId::Sort, vec![input]))
        .unwrap_err();
    assert_eq!(err, GateError::RefInvalid);
}

#[test]
fn forced_token_collision_redraws() {
    struct Scripted(Vec<u64>);
    impl TokenSource for Scripted {
        fn next_token(&mut self) -> u64 {
            self.0.pop().expect("script exhausted")
        }
    }
    // The second issue first draws the same token, then a fresh one.
    let cfg = GateConfig {
        token_source: Some(Box::new(Scripted(vec![33, 7, 7]))),
        ..GateConfig::default()
    };
    let g = Gate::init(cfg);
    let io = gateway();
    let a = ingest(&g, &io, &[ev(0, 1, 1)]);
    let b = ingest(&g, &io, &[ev(0, 2, 2)]);
    assert_eq!(a.0, 7);
    assert_eq!(b.0, 33);
    assert_eq!(g.debug_dump().live_refs, 2);
}

#[test]
fn strict_gate_produces_identical_payloads() {
    let run = |strict: bool| {
        let g = Gate::init(GateConfig {
            strict_gate: strict,
            ..GateConfig::default()
        });
        let io = gateway();
        let input = ingest(&g, &io, &[ev(5, 9, 1), ev(3, 2, 4), ev(4, 2, 3)]);
        let resp = g
            .invoke(GateRequest::new(PrimitiveId::Sort, vec![input]))
            .unwrap();
        io.egress_emit(&g, resp.outputs[0].0)
            .unwrap()
            .open()
            .unwrap()
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn merge_rejects_unsorted_input() {
    let g = gate();
    let io = gateway();
    let unsorted = ingest(&g, &io, &[ev(0, 5, 1), ev(1, 1, 2)]);
    let err = g
        .invoke(GateRequest::new(PrimitiveId::Merge, vec![unsorted]))
        .unwrap_err();
    assert!(matches!(err, GateError::ParamInvalid(_)));
}

#[test]
fn merge_handles_empty_runs() {
    let g = gate();
    let io = gateway();
    let a = ingest(&g, &io, &[ev(0, 1, 1)]);
    let b = ingest(&g, &io, &[]);
    let resp = g
        .invoke(GateRequest::new(PrimitiveId::Merge, vec![a, b]))
        .unwrap();
    let eg = io.egress_emit(&g, resp.outputs[0].0).unwrap();
    assert_eq!(eg.plain_len, 12);
}

#[test]
fn join_window_mismatch_rejected() {
    let g = gate();
    let io = gateway();
    let batch = ingest(&g, &io, &[ev(200_000, 1, 1), ev(1_500_000, 1, 2)]);
    let mut seg = GateRequest::new(PrimitiveId::Segment, vec![batch]);
    seg.params = PrimParams::Segment {
        width_us: 1_000_000,
        watermark: i64::MIN,
    };
    let resp = g.invoke(seg).unwrap();
    let (w0, w1) = (resp.outputs[0].0, resp.outputs[1].0);
    let mut join = GateRequest::new(PrimitiveId::Join, vec![w0, w1]);
    join.params = PrimParams::Join {
        window: 0,
        has_left: true,
        has_right: true,
    };
    let err = g.invoke(join).unwrap_err();
    assert!(matches!(err, GateError::ParamInvalid(m) if m.contains("window")));
}

#[test]
fn aggregate_empty_global_is_empty_input() {
    let g = gate();
    let io = gateway();
    let empty = ingest(&g, &io, &[]);
    let mut req = GateRequest::new(PrimitiveId::Aggregate(AggKind::Avg), vec![empty]);
    req.params = PrimParams::Aggregate { grouped: false };
    assert_eq!(g.invoke(req).unwrap_err(), GateError::EmptyInput);
}

#[test]
fn duplicate_inputs_rejected() {
    let g = gate();
    let io = gateway();
    let a = ingest(&g, &io, &[ev(0, 1, 1)]);
    let err = g
        .invoke(GateRequest::new(PrimitiveId::Concat, vec![a, a]))
        .unwrap_err();
    assert!(matches!(err, GateError::ParamInvalid(_)));
}

#[test]
fn exec_record_ids_match_exchanged_refs() {
    let g = gate();
    let io = gateway();
    let input = ingest(&g, &io, &[ev(0, 2, 1), ev(1, 1, 2)]);
    g.invoke(GateRequest::new(PrimitiveId::Sort, vec![input]))
        .unwrap();
    let records = drain_records(&g);
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].kind, RecordKind::Ingress);
    let ingress_id = records[0].outputs[0];
    assert_eq!(records[1].kind, RecordKind::Exec);
    assert_eq!(records[1].op, Some(PrimOp::Sort));
    assert_eq!(records[1].inputs, vec![ingress_id]);
    assert_eq!(records[1].outputs.len(), 1);
    assert_eq!(records[1].count, 2);
}

#[test]
fn primitive_output_is_deterministic() {
    let run = || {
        let g = gate();
        let io = gateway();
        let mut events = Vec::new();
        for i in 0..1000i32 {
            events.push(ev(i64::from(i * 7 % 97), i * 31 % 17, i.wrapping_mul(2654435761u32 as i32)));
        }
        let input = ingest(&g, &io, &events);
        let resp = g
            .invoke(GateRequest::new(PrimitiveId::Sort, vec![input]))
            .unwrap();
        io.egress_emit(&g, resp.outputs[0].0)
            .unwrap()
            .open()
            .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn finalized_gate_refuses_invocations() {
    let g = gate();
    let io = gateway();
    let input = ingest(&g, &io, &[ev(0, 1, 1)]);
    g.finalize();
    assert_eq!(
        g.invoke(GateRequest::new(PrimitiveId::Sort, vec![input]))
            .unwrap_err(),
        GateError::Finalized
    );
}

#[test]
fn stale_watermark_refused() {
    let g = gate();
    let io = gateway();
    let wm = |v: i64| {
        io.ingest_frame(
            &g,
            Frame::watermark(v),
            EventLayout::ThreeField,
            0,
            1000,
        )
    };
    wm(100).unwrap();
    assert!(wm(100).is_err());
    assert!(wm(50).is_err());
    wm(101).unwrap();
}
