//! The simulated-TEE data plane. The control plane reaches it through
//! exactly four entries — init, invoke, debug dump, finalize — and the only
//! data handle that ever crosses is a 64-bit random opaque reference. Every
//! crossing leaves an audit record. Ingest and egress run on the trusted-IO
//! side (see [`crate::io`]) and never expose payload bytes to the control
//! plane.

pub mod kernels;

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::audit::{AuditRecord, RecordKind, RecordLog, REJECT_PARAM_INVALID, REJECT_REF_INVALID};
use crate::mem::{AllocConfig, Allocator, ArrayKind, MemError, MemoryStats, UArrayHandle};
use crate::model::{AggKind, Event, EventLayout, PrimOp, Schema, WindowSpec};
use crate::util::{fnv1a32, ProcClock};

/// The only token that crosses the trust gate: a 64-bit random integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OpaqueRef(pub u64);

/// Token generator; injectable so tests can force collisions.
pub trait TokenSource: Send {
    fn next_token(&mut self) -> u64;
}

struct CryptoTokens(ChaCha20Rng);

impl TokenSource for CryptoTokens {
    fn next_token(&mut self) -> u64 {
        rand::RngCore::next_u64(&mut self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HintRef {
    Token(OpaqueRef),
    /// Positional reference to an output of the same request, which does not
    /// exist yet at request time.
    Output(u8),
}

/// Untrusted scheduler advice about future consumption of the request's
/// outputs. Placement policy only; wrong hints can cost memory, never data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsumptionHint {
    /// k workers will consume the outputs in parallel.
    Parallel { k: u32 },
    /// `second` will be consumed after `first`.
    After { first: HintRef, second: HintRef },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveId {
    Sort,
    Merge,
    Segment,
    Join,
    Aggregate(AggKind),
    TopK,
    Unique,
    FilterBand,
    Concat,
}

impl PrimitiveId {
    pub fn prim_op(self) -> PrimOp {
        match self {
            PrimitiveId::Sort => PrimOp::Sort,
            PrimitiveId::Merge => PrimOp::Merge,
            PrimitiveId::Segment => PrimOp::Segment,
            PrimitiveId::Join => PrimOp::Join,
            PrimitiveId::Aggregate(kind) => kind.prim_op(),
            PrimitiveId::TopK => PrimOp::TopK,
            PrimitiveId::Unique => PrimOp::Unique,
            PrimitiveId::FilterBand => PrimOp::FilterBand,
            PrimitiveId::Concat => PrimOp::Concat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrimParams {
    #[default]
    None,
    Segment {
        width_us: i64,
        watermark: i64,
    },
    Join {
        window: u64,
        has_left: bool,
        has_right: bool,
    },
    Aggregate {
        grouped: bool,
    },
    TopK {
        k: u32,
    },
    FilterBand {
        lo: i32,
        hi: i32,
    },
}

#[derive(Debug, Clone)]
pub struct GateRequest {
    pub primitive: PrimitiveId,
    pub inputs: Vec<OpaqueRef>,
    /// Ownership transfer per input: consumed inputs are retired after the
    /// primitive runs.
    pub consume: Vec<bool>,
    pub params: PrimParams,
    pub hints: Vec<ConsumptionHint>,
    pub out_kind: ArrayKind,
}

impl GateRequest {
    pub fn new(primitive: PrimitiveId, inputs: Vec<OpaqueRef>) -> Self {
        let consume = vec![true; inputs.len()];
        GateRequest {
            primitive,
            inputs,
            consume,
            params: PrimParams::None,
            hints: Vec::new(),
            out_kind: ArrayKind::Streaming,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateResponse {
    /// Newly issued references with their window tags.
    pub outputs: Vec<(OpaqueRef, Option<u64>)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GateError {
    #[error("REF_INVALID: unknown or retired opaque reference")]
    RefInvalid,
    #[error("PARAM_INVALID: {0}")]
    ParamInvalid(String),
    #[error("EMPTY_INPUT: aggregate over empty input")]
    EmptyInput,
    #[error("LIFECYCLE_VIOLATION: {0}")]
    Lifecycle(String),
    #[error("stale watermark: values must be strictly increasing per source")]
    StaleWatermark,
    #[error("data plane already finalized")]
    Finalized,
}

impl From<MemError> for GateError {
    fn from(e: MemError) -> Self {
        match e {
            MemError::LifecycleViolation(m) => GateError::Lifecycle(m.to_string()),
            MemError::GroupCapacity => GateError::ParamInvalid("group capacity".into()),
            MemError::UnknownArray => GateError::RefInvalid,
            MemError::BadSize => GateError::ParamInvalid("payload size".into()),
        }
    }
}

struct RefEntry {
    handle: UArrayHandle,
}

struct RefTable {
    map: HashMap<u64, RefEntry>,
    used: HashSet<u64>,
    tokens: Box<dyn TokenSource>,
}

impl RefTable {
    /// Issues a fresh token, redrawing on collision with any live or
    /// previously used token.
    fn issue(&mut self, handle: UArrayHandle) -> OpaqueRef {
        loop {
            let t = self.tokens.next_token();
            if self.map.contains_key(&t) || self.used.contains(&t) {
                continue;
            }
            self.used.insert(t);
            self.map.insert(t, RefEntry { handle });
            return OpaqueRef(t);
        }
    }

    fn lookup(&self, t: u64) -> Option<&RefEntry> {
        self.map.get(&t)
    }

    fn drop_token(&mut self, t: u64) {
        self.map.remove(&t);
    }

    fn live(&self) -> usize {
        self.map.len()
    }
}

pub struct GateConfig {
    pub alloc: AllocConfig,
    /// Byte-copies marshaled requests and responses across the gate to
    /// emulate world-switch marshaling cost.
    pub strict_gate: bool,
    /// Compiles out reference validation and audit-record generation while
    /// preserving the call structure.
    pub insecure: bool,
    pub clock: ProcClock,
    pub token_source: Option<Box<dyn TokenSource>>,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            alloc: AllocConfig::default(),
            strict_gate: false,
            insecure: false,
            clock: ProcClock::new(),
            token_source: None,
        }
    }
}

/// Counters-only view exported by the debug entry.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct DebugCounters {
    pub mem: MemoryStats,
    pub invocations: u64,
    pub rejects: u64,
    pub live_refs: u64,
    pub audit_records: u64,
    pub audit_buffered: u64,
    pub audit_raw_bytes: u64,
    pub audit_append_nanos: u64,
    pub exec_nanos: u64,
    pub marshal_bytes: u64,
    pub hint_anomalies: u64,
    pub ingress_events: u64,
    pub late_drops: u64,
}

struct OutSpec {
    schema: Schema,
    window: Option<u64>,
    bytes: Vec<u8>,
    items: u64,
}

struct ExecResult {
    outputs: Vec<OutSpec>,
    late_drop: u64,
}

/// The data plane behind the gate.
pub struct Gate {
    strict: bool,
    insecure: bool,
    alloc: Allocator,
    refs: Mutex<RefTable>,
    log: RecordLog,
    clock: ProcClock,
    closed: AtomicBool,
    invocations: AtomicU64,
    rejects: AtomicU64,
    exec_nanos: AtomicU64,
    marshal_bytes: AtomicU64,
    ingress_events: AtomicU64,
    late_drops: AtomicU64,
    last_wm: Mutex<HashMap<u8, i64>>,
}

impl Gate {
    /// Entry 1: initialization.
    pub fn init(cfg: GateConfig) -> Gate {
        let tokens = cfg
            .token_source
            .unwrap_or_else(|| Box::new(CryptoTokens(ChaCha20Rng::from_os_rng())));
        Gate {
            strict: cfg.strict_gate,
            insecure: cfg.insecure,
            alloc: Allocator::new(cfg.alloc),
            refs: Mutex::new(RefTable {
                map: HashMap::new(),
                used: HashSet::new(),
                tokens,
            }),
            log: RecordLog::new(),
            clock: cfg.clock,
            closed: AtomicBool::new(false),
            invocations: AtomicU64::new(0),
            rejects: AtomicU64::new(0),
            exec_nanos: AtomicU64::new(0),
            marshal_bytes: AtomicU64::new(0),
            ingress_events: AtomicU64::new(0),
            late_drops: AtomicU64::new(0),
            last_wm: Mutex::new(HashMap::new()),
        }
    }

    /// Entry 2: the one invoke shared by all trusted primitives.
    pub fn invoke(&self, req: GateRequest) -> Result<GateResponse, GateError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(GateError::Finalized);
        }
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let req = if self.strict {
            let bytes = abi::encode_request(&req);
            self.marshal_bytes
                .fetch_add(bytes.len() as u64, Ordering::Relaxed);
            abi::decode_request(&bytes).expect("strict-gate request roundtrip")
        } else {
            req
        };
        let op = req.primitive.prim_op();

        match self.invoke_inner(&req, op) {
            Ok(resp) => {
                if self.strict {
                    let bytes = abi::encode_response(&resp);
                    self.marshal_bytes
                        .fetch_add(bytes.len() as u64, Ordering::Relaxed);
                    Ok(abi::decode_response(&bytes).expect("strict-gate response roundtrip"))
                } else {
                    Ok(resp)
                }
            }
            Err(e) => {
                self.reject(op, &e);
                Err(e)
            }
        }
    }

    fn reject(&self, op: PrimOp, e: &GateError) {
        self.rejects.fetch_add(1, Ordering::Relaxed);
        if self.insecure {
            return;
        }
        let code = match e {
            GateError::RefInvalid => REJECT_REF_INVALID,
            _ => REJECT_PARAM_INVALID,
        };
        self.log.append(AuditRecord {
            ts: self.clock.now_us(),
            kind: RecordKind::Reject,
            op: Some(op),
            inputs: Vec::new(),
            outputs: Vec::new(),
            window_no: None,
            count: 0,
            watermark_value: None,
            hint_digest: None,
            source: None,
            code: Some(code),
        });
    }

    fn invoke_inner(&self, req: &GateRequest, op: PrimOp) -> Result<GateResponse, GateError> {
        if req.consume.len() != req.inputs.len() {
            return Err(GateError::ParamInvalid(
                "consume flags must match inputs".into(),
            ));
        }
        {
            let mut seen = HashSet::new();
            for r in &req.inputs {
                if !seen.insert(r.0) {
                    return Err(GateError::ParamInvalid("duplicate input reference".into()));
                }
            }
        }

        // Resolve references; unknown tokens reject the whole request.
        let handles: Vec<UArrayHandle> = {
            let refs = self.refs.lock().unwrap();
            let mut hs = Vec::with_capacity(req.inputs.len());
            for r in &req.inputs {
                match refs.lookup(r.0) {
                    Some(e) => hs.push(e.handle.clone()),
                    None => return Err(GateError::RefInvalid),
                }
            }
            hs
        };
        for h in &handles {
            if h.state() != Some(crate::mem::ArrayState::Produced) {
                return Err(GateError::Lifecycle("inputs must be sealed".into()));
            }
        }

        // Watermark trigger references ride at the tail of the input list.
        let data_n = handles
            .iter()
            .take_while(|h| h.schema() != Schema::Watermark)
            .count();
        if handles[data_n..]
            .iter()
            .any(|h| h.schema() != Schema::Watermark)
        {
            return Err(GateError::ParamInvalid(
                "watermark references must trail data inputs".into(),
            ));
        }
        let data = &handles[..data_n];

        let t0 = std::time::Instant::now();
        let result = self.execute(req, data)?;
        self.exec_nanos
            .fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);

        // Placement hints: resolve predecessors, count anomalies, digest.
        let (preds, digest) = self.resolve_hints(&req.hints);

        let mut out_handles = Vec::with_capacity(result.outputs.len());
        for (pos, o) in result.outputs.iter().enumerate() {
            let pred = preds.get(&(pos as u8)).copied();
            let h = self.alloc.create(req.out_kind, o.schema, o.window, pred)?;
            h.append_bytes(&o.bytes)?;
            h.seal()?;
            out_handles.push(h);
        }

        if result.late_drop > 0 {
            self.late_drops.fetch_add(result.late_drop, Ordering::Relaxed);
        }

        if !self.insecure {
            let ts = self.clock.now_us();
            let in_ids: Vec<u64> = handles.iter().map(|h| h.id()).collect();
            let mut records = Vec::new();
            if req.primitive == PrimitiveId::Segment {
                for (o, h) in result.outputs.iter().zip(&out_handles) {
                    records.push(AuditRecord {
                        ts,
                        kind: RecordKind::Wnd,
                        op: Some(op),
                        inputs: in_ids.clone(),
                        outputs: vec![h.id()],
                        window_no: o.window,
                        count: o.items,
                        watermark_value: None,
                        hint_digest: digest,
                        source: None,
                        code: None,
                    });
                }
                if result.late_drop > 0 {
                    records.push(AuditRecord {
                        ts,
                        kind: RecordKind::Drop,
                        op: Some(op),
                        inputs: in_ids.clone(),
                        outputs: Vec::new(),
                        window_no: None,
                        count: result.late_drop,
                        watermark_value: None,
                        hint_digest: None,
                        source: None,
                        code: None,
                    });
                }
            } else {
                records.push(AuditRecord {
                    ts,
                    kind: RecordKind::Exec,
                    op: Some(op),
                    inputs: in_ids,
                    outputs: out_handles.iter().map(|h| h.id()).collect(),
                    window_no: result.outputs.first().and_then(|o| o.window),
                    count: result.outputs.iter().map(|o| o.items).sum(),
                    watermark_value: None,
                    hint_digest: digest,
                    source: None,
                    code: None,
                });
            }
            self.log.append_batch(records);
        }

        // Ownership transfer: consumed inputs retire now.
        let mut touched_groups = Vec::new();
        {
            let mut refs = self.refs.lock().unwrap();
            for ((h, r), &consume) in handles.iter().zip(&req.inputs).zip(&req.consume) {
                if consume {
                    h.retire()?;
                    refs.drop_token(r.0);
                    touched_groups.push(h.group_id());
                }
            }
        }
        if !touched_groups.is_empty() {
            self.alloc.reclaim();
        }

        let mut refs = self.refs.lock().unwrap();
        let outputs = out_handles
            .into_iter()
            .map(|h| {
                let w = h.window();
                (refs.issue(h), w)
            })
            .collect();
        Ok(GateResponse { outputs })
    }

    fn resolve_hints(
        &self,
        hints: &[ConsumptionHint],
    ) -> (HashMap<u8, u64>, Option<u32>) {
        if hints.is_empty() {
            return (HashMap::new(), None);
        }
        let refs = self.refs.lock().unwrap();
        let mut preds = HashMap::new();
        let mut canon = Vec::new();
        for h in hints {
            match h {
                ConsumptionHint::After {
                    first: HintRef::Token(t),
                    second: HintRef::Output(pos),
                } => match refs.lookup(t.0) {
                    Some(e) => {
                        let id = e.handle.id();
                        preds.insert(*pos, id);
                        canon.push(1u8);
                        canon.extend_from_slice(&id.to_le_bytes());
                        canon.push(*pos);
                    }
                    None => self.alloc.note_hint_anomaly(),
                },
                ConsumptionHint::Parallel { k } => {
                    if *k < 2 {
                        self.alloc.note_hint_anomaly();
                    } else {
                        // k is scheduling advice, not part of the canonical
                        // form: placement and replay do not depend on it.
                        canon.push(2u8);
                    }
                }
                ConsumptionHint::After { .. } => self.alloc.note_hint_anomaly(),
            }
        }
        let digest = if canon.is_empty() {
            None
        } else {
            Some(fnv1a32(&canon))
        };
        (preds, digest)
    }

    fn execute(&self, req: &GateRequest, data: &[UArrayHandle]) -> Result<ExecResult, GateError> {
        let events_of = |h: &UArrayHandle| -> Result<(Vec<Event>, EventLayout), GateError> {
            match h.schema() {
                Schema::Events(layout) => {
                    let bytes = h.copy_out()?;
                    Ok((layout.decode_all(&bytes), layout))
                }
                _ => Err(GateError::ParamInvalid("expected event input".into())),
            }
        };
        let single = |data: &[UArrayHandle]| -> Result<UArrayHandle, GateError> {
            if data.len() != 1 {
                return Err(GateError::ParamInvalid("expected one data input".into()));
            }
            Ok(data[0].clone())
        };
        let common_window = |data: &[UArrayHandle]| -> Result<Option<u64>, GateError> {
            let w = data.first().and_then(|h| h.window());
            for h in data {
                if h.window() != w {
                    return Err(GateError::ParamInvalid("window mismatch".into()));
                }
            }
            Ok(w)
        };

        match (req.primitive, req.params) {
            (PrimitiveId::Sort, _) => {
                let h = single(data)?;
                let (mut events, layout) = events_of(&h)?;
                kernels::sort_events(&mut events);
                Ok(ExecResult {
                    outputs: vec![OutSpec {
                        schema: Schema::Events(layout),
                        window: h.window(),
                        items: events.len() as u64,
                        bytes: layout.encode_all(&events),
                    }],
                    late_drop: 0,
                })
            }
            (PrimitiveId::Merge, _) => {
                if data.is_empty() {
                    return Err(GateError::ParamInvalid("merge needs inputs".into()));
                }
                let window = common_window(data)?;
                let mut runs = Vec::with_capacity(data.len());
                let mut layout = None;
                for h in data {
                    let (events, l) = events_of(h)?;
                    if *layout.get_or_insert(l) != l {
                        return Err(GateError::ParamInvalid("layout mismatch".into()));
                    }
                    if !kernels::sampled_sorted(&events) {
                        return Err(GateError::ParamInvalid("merge input not sorted".into()));
                    }
                    runs.push(events);
                }
                let layout = layout.unwrap();
                let merged = kernels::merge_sorted(&runs);
                Ok(ExecResult {
                    outputs: vec![OutSpec {
                        schema: Schema::Events(layout),
                        window,
                        items: merged.len() as u64,
                        bytes: layout.encode_all(&merged),
                    }],
                    late_drop: 0,
                })
            }
            (PrimitiveId::Segment, PrimParams::Segment { width_us, watermark }) => {
                if width_us <= 0 {
                    return Err(GateError::ParamInvalid("window width must be positive".into()));
                }
                let h = single(data)?;
                let (events, layout) = events_of(&h)?;
                let (windows, late) = kernels::segment(&events, WindowSpec::new(width_us), watermark);
                let outputs = windows
                    .into_iter()
                    .map(|(w, evs)| OutSpec {
                        schema: Schema::Events(layout),
                        window: Some(w),
                        items: evs.len() as u64,
                        bytes: layout.encode_all(&evs),
                    })
                    .collect();
                Ok(ExecResult {
                    outputs,
                    late_drop: late,
                })
            }
            (PrimitiveId::Segment, _) => {
                Err(GateError::ParamInvalid("segment needs window params".into()))
            }
            (
                PrimitiveId::Join,
                PrimParams::Join {
                    window,
                    has_left,
                    has_right,
                },
            ) => {
                let expected = usize::from(has_left) + usize::from(has_right);
                if data.len() != expected {
                    return Err(GateError::ParamInvalid("join side count mismatch".into()));
                }
                for h in data {
                    if h.window() != Some(window) {
                        return Err(GateError::ParamInvalid("window mismatch".into()));
                    }
                }
                let mut iter = data.iter();
                let left = if has_left {
                    events_of(iter.next().unwrap())?.0
                } else {
                    Vec::new()
                };
                let right = if has_right {
                    events_of(iter.next().unwrap())?.0
                } else {
                    Vec::new()
                };
                let rows = kernels::join(&left, &right);
                Ok(ExecResult {
                    outputs: vec![OutSpec {
                        schema: Schema::JoinRow,
                        window: Some(window),
                        items: rows.len() as u64,
                        bytes: kernels::encode_join_rows(&rows),
                    }],
                    late_drop: 0,
                })
            }
            (PrimitiveId::Join, _) => Err(GateError::ParamInvalid("join needs params".into())),
            (PrimitiveId::Aggregate(kind), params) => {
                let grouped = match params {
                    PrimParams::Aggregate { grouped } => grouped,
                    _ => return Err(GateError::ParamInvalid("aggregate needs params".into())),
                };
                let window = common_window(data)?;
                if kind == AggKind::AboveAvgCount {
                    let h = single(data)?;
                    if h.schema() != Schema::KeyF64Ex {
                        return Err(GateError::ParamInvalid(
                            "rank aggregate needs keyed averages with group field".into(),
                        ));
                    }
                    let rows = kernels::decode_key_f64_ex(&h.copy_out()?);
                    let ranked = kernels::above_avg_count(&rows);
                    return Ok(ExecResult {
                        outputs: vec![OutSpec {
                            schema: Schema::KeyI64,
                            window,
                            items: ranked.len() as u64,
                            bytes: kernels::encode_key_i64(&ranked),
                        }],
                        late_drop: 0,
                    });
                }
                if grouped {
                    let h = single(data)?;
                    let (events, layout) = events_of(&h)?;
                    let out = kernels::aggregate_grouped(
                        &events,
                        kind,
                        layout == EventLayout::FourField,
                    );
                    let (schema, bytes, items) = match out {
                        kernels::GroupedAgg::KeyI64(rows) => (
                            Schema::KeyI64,
                            kernels::encode_key_i64(&rows),
                            rows.len() as u64,
                        ),
                        kernels::GroupedAgg::KeySumCnt(rows) => (
                            Schema::KeySumCnt,
                            kernels::encode_key_sumcnt(&rows),
                            rows.len() as u64,
                        ),
                        kernels::GroupedAgg::KeyF64(rows) => (
                            Schema::KeyF64,
                            kernels::encode_key_f64(&rows),
                            rows.len() as u64,
                        ),
                        kernels::GroupedAgg::KeyF64Ex(rows) => (
                            Schema::KeyF64Ex,
                            kernels::encode_key_f64_ex(&rows),
                            rows.len() as u64,
                        ),
                        kernels::GroupedAgg::KeyI32(rows) => (
                            Schema::KeyI32,
                            kernels::encode_key_i32(&rows),
                            rows.len() as u64,
                        ),
                    };
                    Ok(ExecResult {
                        outputs: vec![OutSpec {
                            schema,
                            window,
                            bytes,
                            items,
                        }],
                        late_drop: 0,
                    })
                } else {
                    if data.is_empty() {
                        return Err(GateError::ParamInvalid("aggregate needs inputs".into()));
                    }
                    let mut decoded = Vec::with_capacity(data.len());
                    for h in data {
                        decoded.push(events_of(h)?.0);
                    }
                    let slices: Vec<&[Event]> = decoded.iter().map(|v| v.as_slice()).collect();
                    let out =
                        kernels::aggregate_global(&slices, kind).ok_or(GateError::EmptyInput)?;
                    let (schema, bytes) = match out {
                        kernels::GlobalAgg::I64(v) => (Schema::I64, v.to_le_bytes().to_vec()),
                        kernels::GlobalAgg::F64(v) => (Schema::F64, v.to_le_bytes().to_vec()),
                        kernels::GlobalAgg::I32(v) => (Schema::I32, v.to_le_bytes().to_vec()),
                        kernels::GlobalAgg::I64I64(a, b) => {
                            let mut bytes = a.to_le_bytes().to_vec();
                            bytes.extend_from_slice(&b.to_le_bytes());
                            (Schema::I64I64, bytes)
                        }
                    };
                    Ok(ExecResult {
                        outputs: vec![OutSpec {
                            schema,
                            window,
                            items: 1,
                            bytes,
                        }],
                        late_drop: 0,
                    })
                }
            }
            (PrimitiveId::TopK, PrimParams::TopK { k }) => {
                if k == 0 {
                    return Err(GateError::ParamInvalid("topk needs k >= 1".into()));
                }
                let h = single(data)?;
                let (events, layout) = events_of(&h)?;
                let out = kernels::topk(&events, k);
                Ok(ExecResult {
                    outputs: vec![OutSpec {
                        schema: Schema::Events(layout),
                        window: h.window(),
                        items: out.len() as u64,
                        bytes: layout.encode_all(&out),
                    }],
                    late_drop: 0,
                })
            }
            (PrimitiveId::TopK, _) => Err(GateError::ParamInvalid("topk needs params".into())),
            (PrimitiveId::Unique, _) => {
                let h = single(data)?;
                let (events, _) = events_of(&h)?;
                let (keys, n) = kernels::unique(&events);
                Ok(ExecResult {
                    outputs: vec![OutSpec {
                        schema: Schema::I32,
                        window: h.window(),
                        items: n,
                        bytes: kernels::encode_i32s(&keys),
                    }],
                    late_drop: 0,
                })
            }
            (PrimitiveId::FilterBand, PrimParams::FilterBand { lo, hi }) => {
                if lo > hi {
                    return Err(GateError::ParamInvalid("band is empty (lo > hi)".into()));
                }
                let h = single(data)?;
                let (events, layout) = events_of(&h)?;
                let out = kernels::filter_band(&events, lo, hi);
                Ok(ExecResult {
                    outputs: vec![OutSpec {
                        schema: Schema::Events(layout),
                        window: h.window(),
                        items: out.len() as u64,
                        bytes: layout.encode_all(&out),
                    }],
                    late_drop: 0,
                })
            }
            (PrimitiveId::FilterBand, _) => {
                Err(GateError::ParamInvalid("filter needs band params".into()))
            }
            (PrimitiveId::Concat, _) => {
                if data.is_empty() {
                    return Err(GateError::ParamInvalid("concat needs inputs".into()));
                }
                let schema = data[0].schema();
                let window = common_window(data)?;
                let mut bytes = Vec::new();
                let mut items = 0u64;
                for h in data {
                    if h.schema() != schema {
                        return Err(GateError::ParamInvalid("schema mismatch".into()));
                    }
                    bytes.extend_from_slice(&h.copy_out()?);
                    items += h.len();
                }
                Ok(ExecResult {
                    outputs: vec![OutSpec {
                        schema,
                        window,
                        bytes,
                        items,
                    }],
                    late_drop: 0,
                })
            }
        }
    }

    /// Entry 3: debug dump, counters only — no contents, no addresses.
    pub fn debug_dump(&self) -> DebugCounters {
        DebugCounters {
            mem: self.alloc.stats(),
            invocations: self.invocations.load(Ordering::Relaxed),
            rejects: self.rejects.load(Ordering::Relaxed),
            live_refs: self.refs.lock().unwrap().live() as u64,
            audit_records: self.log.total_records(),
            audit_buffered: self.log.buffered() as u64,
            audit_raw_bytes: self.log.raw_bytes(),
            audit_append_nanos: self.log.append_nanos(),
            exec_nanos: self.exec_nanos.load(Ordering::Relaxed),
            marshal_bytes: self.marshal_bytes.load(Ordering::Relaxed),
            hint_anomalies: self.alloc.hint_anomalies(),
            ingress_events: self.ingress_events.load(Ordering::Relaxed),
            late_drops: self.late_drops.load(Ordering::Relaxed),
        }
    }

    /// Entry 4: finalization. Subsequent invocations are refused; buffered
    /// audit records remain drainable by the flusher.
    pub fn finalize(&self) -> DebugCounters {
        self.closed.store(true, Ordering::Release);
        self.debug_dump()
    }

    pub fn clock(&self) -> &ProcClock {
        &self.clock
    }

    pub fn log(&self) -> &RecordLog {
        &self.log
    }

    pub fn mem_stats(&self) -> MemoryStats {
        self.alloc.stats()
    }

    /// Trusted-IO ingest of a packed event batch. Returns the new reference
    /// and the batch length.
    pub(crate) fn ingest_events(
        &self,
        payload: &[u8],
        layout: EventLayout,
        source: u8,
    ) -> Result<(OpaqueRef, u64), GateError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(GateError::Finalized);
        }
        if payload.len() % layout.item_size() != 0 {
            return Err(GateError::ParamInvalid("ragged event payload".into()));
        }
        let h = self
            .alloc
            .create(ArrayKind::Streaming, Schema::Events(layout), None, None)?;
        h.append_bytes(payload)?;
        h.seal()?;
        let id = h.id();
        let n = h.len();
        self.ingress_events.fetch_add(n, Ordering::Relaxed);
        if !self.insecure {
            self.log
                .append(AuditRecord::ingress(self.clock.now_us(), id, n, source));
        }
        let token = self.refs.lock().unwrap().issue(h);
        Ok((token, n))
    }

    /// Trusted-IO ingest of a watermark; materialized as a one-value array
    /// so close-chain executions can name their trigger.
    pub(crate) fn ingest_watermark(
        &self,
        value: i64,
        source: u8,
    ) -> Result<(OpaqueRef, u64), GateError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(GateError::Finalized);
        }
        {
            let mut wm = self.last_wm.lock().unwrap();
            match wm.get(&source) {
                Some(&prev) if value <= prev => {
                    self.reject(PrimOp::Segment, &GateError::StaleWatermark);
                    return Err(GateError::StaleWatermark);
                }
                _ => {
                    wm.insert(source, value);
                }
            }
        }
        let h = self
            .alloc
            .create(ArrayKind::Streaming, Schema::Watermark, None, None)?;
        h.append_bytes(&value.to_le_bytes())?;
        h.seal()?;
        let id = h.id();
        if !self.insecure {
            self.log.append(AuditRecord::ingress_watermark(
                self.clock.now_us(),
                id,
                value,
                source,
            ));
        }
        let token = self.refs.lock().unwrap().issue(h);
        Ok((token, id))
    }

    /// Trusted-IO egress: reads out the result payload, emits the egress
    /// record, and retires the array.
    pub(crate) fn egress_take(
        &self,
        r: OpaqueRef,
    ) -> Result<(Vec<u8>, Schema, Option<u64>, u64), GateError> {
        let handle = {
            let refs = self.refs.lock().unwrap();
            match refs.lookup(r.0) {
                Some(e) => e.handle.clone(),
                None => {
                    self.reject(PrimOp::Concat, &GateError::RefInvalid);
                    return Err(GateError::RefInvalid);
                }
            }
        };
        let bytes = handle.copy_out()?;
        let schema = handle.schema();
        let window = handle.window();
        let id = handle.id();
        if !self.insecure {
            self.log.append(AuditRecord::egress(
                self.clock.now_us(),
                id,
                handle.len(),
            ));
        }
        handle.retire()?;
        self.refs.lock().unwrap().drop_token(r.0);
        self.alloc.reclaim();
        Ok((bytes, schema, window, id))
    }

    #[cfg(test)]
    pub(crate) fn allocator(&self) -> &Allocator {
        &self.alloc
    }
}

/// Binary layouts for the gate ABI, used verbatim by the strict-gate
/// marshaling path; documented in `docs/formats.md`.
pub mod abi {
    use super::*;
    use crate::util::{get_varint, put_varint};

    fn prim_code(p: PrimitiveId) -> (u8, Option<u8>) {
        match p {
            PrimitiveId::Sort => (0, None),
            PrimitiveId::Merge => (1, None),
            PrimitiveId::Segment => (2, None),
            PrimitiveId::Join => (3, None),
            PrimitiveId::Aggregate(k) => (4, Some(k.prim_op().code())),
            PrimitiveId::TopK => (5, None),
            PrimitiveId::Unique => (6, None),
            PrimitiveId::FilterBand => (7, None),
            PrimitiveId::Concat => (8, None),
        }
    }

    fn agg_from_code(c: u8) -> Option<AggKind> {
        Some(match PrimOp::from_code(c)? {
            PrimOp::AggSum => AggKind::Sum,
            PrimOp::AggCount => AggKind::Count,
            PrimOp::AggAvg => AggKind::Avg,
            PrimOp::AggMedian => AggKind::Median,
            PrimOp::AggSumCnt => AggKind::SumCnt,
            PrimOp::AggAboveAvgCount => AggKind::AboveAvgCount,
            _ => return None,
        })
    }

    pub fn encode_request(req: &GateRequest) -> Vec<u8> {
        let mut out = Vec::new();
        let (code, agg) = prim_code(req.primitive);
        out.push(code);
        if let Some(a) = agg {
            out.push(a);
        }
        match req.params {
            PrimParams::None => out.push(0),
            PrimParams::Segment { width_us, watermark } => {
                out.push(1);
                out.extend_from_slice(&width_us.to_le_bytes());
                out.extend_from_slice(&watermark.to_le_bytes());
            }
            PrimParams::Join {
                window,
                has_left,
                has_right,
            } => {
                out.push(2);
                out.extend_from_slice(&window.to_le_bytes());
                out.push(u8::from(has_left) << 1 | u8::from(has_right));
            }
            PrimParams::Aggregate { grouped } => {
                out.push(3);
                out.push(u8::from(grouped));
            }
            PrimParams::TopK { k } => {
                out.push(4);
                out.extend_from_slice(&k.to_le_bytes());
            }
            PrimParams::FilterBand { lo, hi } => {
                out.push(5);
                out.extend_from_slice(&lo.to_le_bytes());
                out.extend_from_slice(&hi.to_le_bytes());
            }
        }
        put_varint(&mut out, req.inputs.len() as u64);
        for r in &req.inputs {
            out.extend_from_slice(&r.0.to_le_bytes());
        }
        for flag in &req.consume {
            out.push(u8::from(*flag));
        }
        put_varint(&mut out, req.hints.len() as u64);
        for h in &req.hints {
            match h {
                ConsumptionHint::After { first, second } => {
                    out.push(1);
                    encode_hint_ref(first, &mut out);
                    encode_hint_ref(second, &mut out);
                }
                ConsumptionHint::Parallel { k } => {
                    out.push(2);
                    out.extend_from_slice(&k.to_le_bytes());
                }
            }
        }
        out.push(match req.out_kind {
            ArrayKind::Streaming => 0,
            ArrayKind::State => 1,
            ArrayKind::Temporary => 2,
        });
        out
    }

    fn encode_hint_ref(r: &HintRef, out: &mut Vec<u8>) {
        match r {
            HintRef::Token(t) => {
                out.push(0);
                out.extend_from_slice(&t.0.to_le_bytes());
            }
            HintRef::Output(p) => {
                out.push(1);
                out.push(*p);
            }
        }
    }

    fn decode_hint_ref(buf: &[u8], pos: &mut usize) -> Option<HintRef> {
        let tag = *buf.get(*pos)?;
        *pos += 1;
        match tag {
            0 => {
                let t = u64::from_le_bytes(buf.get(*pos..*pos + 8)?.try_into().unwrap());
                *pos += 8;
                Some(HintRef::Token(OpaqueRef(t)))
            }
            1 => {
                let p = *buf.get(*pos)?;
                *pos += 1;
                Some(HintRef::Output(p))
            }
            _ => None,
        }
    }

    pub fn decode_request(buf: &[u8]) -> Option<GateRequest> {
        let mut pos = 0usize;
        let code = *buf.get(pos)?;
        pos += 1;
        let primitive = match code {
            0 => PrimitiveId::Sort,
            1 => PrimitiveId::Merge,
            2 => PrimitiveId::Segment,
            3 => PrimitiveId::Join,
            4 => {
                let k = *buf.get(pos)?;
                pos += 1;
                PrimitiveId::Aggregate(agg_from_code(k)?)
            }
            5 => PrimitiveId::TopK,
            6 => PrimitiveId::Unique,
            7 => PrimitiveId::FilterBand,
            8 => PrimitiveId::Concat,
            _ => return None,
        };
        let ptag = *buf.get(pos)?;
        pos += 1;
        let params = match ptag {
            0 => PrimParams::None,
            1 => {
                let width_us =
                    i64::from_le_bytes(buf.get(pos..pos + 8)?.try_into().unwrap());
                let watermark =
                    i64::from_le_bytes(buf.get(pos + 8..pos + 16)?.try_into().unwrap());
                pos += 16;
                PrimParams::Segment { width_us, watermark }
            }
            2 => {
                let window = u64::from_le_bytes(buf.get(pos..pos + 8)?.try_into().unwrap());
                let sides = *buf.get(pos + 8)?;
                pos += 9;
                PrimParams::Join {
                    window,
                    has_left: sides & 2 != 0,
                    has_right: sides & 1 != 0,
                }
            }
            3 => {
                let grouped = *buf.get(pos)? != 0;
                pos += 1;
                PrimParams::Aggregate { grouped }
            }
            4 => {
                let k = u32::from_le_bytes(buf.get(pos..pos + 4)?.try_into().unwrap());
                pos += 4;
                PrimParams::TopK { k }
            }
            5 => {
                let lo = i32::from_le_bytes(buf.get(pos..pos + 4)?.try_into().unwrap());
                let hi = i32::from_le_bytes(buf.get(pos + 4..pos + 8)?.try_into().unwrap());
                pos += 8;
                PrimParams::FilterBand { lo, hi }
            }
            _ => return None,
        };
        let n = get_varint(buf, &mut pos)? as usize;
        let mut inputs = Vec::with_capacity(n);
        for _ in 0..n {
            inputs.push(OpaqueRef(u64::from_le_bytes(
                buf.get(pos..pos + 8)?.try_into().unwrap(),
            )));
            pos += 8;
        }
        let mut consume = Vec::with_capacity(n);
        for _ in 0..n {
            consume.push(*buf.get(pos)? != 0);
            pos += 1;
        }
        let hn = get_varint(buf, &mut pos)? as usize;
        let mut hints = Vec::with_capacity(hn);
        for _ in 0..hn {
            let tag = *buf.get(pos)?;
            pos += 1;
            hints.push(match tag {
                1 => ConsumptionHint::After {
                    first: decode_hint_ref(buf, &mut pos)?,
                    second: decode_hint_ref(buf, &mut pos)?,
                },
                2 => {
                    let k = u32::from_le_bytes(buf.get(pos..pos + 4)?.try_into().unwrap());
                    pos += 4;
                    ConsumptionHint::Parallel { k }
                }
                _ => return None,
            });
        }
        let out_kind = match *buf.get(pos)? {
            0 => ArrayKind::Streaming,
            1 => ArrayKind::State,
            2 => ArrayKind::Temporary,
            _ => return None,
        };
        pos += 1;
        if pos != buf.len() {
            return None;
        }
        Some(GateRequest {
            primitive,
            inputs,
            consume,
            params,
            hints,
            out_kind,
        })
    }

    pub fn encode_response(resp: &GateResponse) -> Vec<u8> {
        let mut out = Vec::new();
        put_varint(&mut out, resp.outputs.len() as u64);
        for (r, w) in &resp.outputs {
            out.extend_from_slice(&r.0.to_le_bytes());
            match w {
                Some(w) => {
                    out.push(1);
                    out.extend_from_slice(&w.to_le_bytes());
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn decode_response(buf: &[u8]) -> Option<GateResponse> {
        let mut pos = 0usize;
        let n = get_varint(buf, &mut pos)? as usize;
        let mut outputs = Vec::with_capacity(n);
        for _ in 0..n {
            let t = u64::from_le_bytes(buf.get(pos..pos + 8)?.try_into().unwrap());
            pos += 8;
            let has_w = *buf.get(pos)?;
            pos += 1;
            let w = if has_w == 1 {
                let w = u64::from_le_bytes(buf.get(pos..pos + 8)?.try_into().unwrap());
                pos += 8;
                Some(w)
            } else {
                None
            };
            outputs.push((OpaqueRef(t), w));
        }
        if pos != buf.len() {
            return None;
        }
        Some(GateResponse { outputs })
    }
}
