//! The untrusted control plane: ingestion, a worker pool pulling tasks from
//! a shared queue, watermark-driven window scheduling, consumption-hint
//! emission, and backpressure. The control plane holds only opaque
//! references and window bookkeeping; event bytes never leave the gate.
//!
//! Determinism: a window's state arrays are always consumed in batch
//! ingestion order regardless of which workers produced them and in which
//! order they finished, so per-window egress payloads are identical for any
//! worker count.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use thiserror::Error;

use crate::audit::{BlockWriter, CompressedBlock, LOG_KEY};
use crate::dataplane::{
    ConsumptionHint, DebugCounters, Gate, GateConfig, GateRequest, HintRef, OpaqueRef,
    PrimParams, PrimitiveId,
};
use crate::io::{Frame, IngestPath, Ingested, IoError, IoGateway};
use crate::mem::{AllocConfig, ArrayKind};
use crate::model::{ClosePrim, Plan, PrimOp, Schema, StepInput};
use crate::util::ProcClock;

/// Engine build variants for overhead comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Full protection: encrypted ingress, trusted-direct IO, gate + audit.
    Sbt,
    /// Cleartext ingress (trusted source-edge link), gate + audit.
    ClearIngress,
    /// Encrypted ingress via the untrusted OS: one extra payload copy.
    IoViaOs,
    /// Gate checks and audit compiled out, cleartext IO; the call structure
    /// is preserved for fair comparison.
    Insecure,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        Some(match s {
            "sbt" => Variant::Sbt,
            "clear-ingress" => Variant::ClearIngress,
            "io-via-os" => Variant::IoViaOs,
            "insecure" => Variant::Insecure,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sbt => "sbt",
            Variant::ClearIngress => "clear-ingress",
            Variant::IoViaOs => "io-via-os",
            Variant::Insecure => "insecure",
        }
    }

    pub fn encrypted_source(self) -> bool {
        matches!(self, Variant::Sbt | Variant::IoViaOs)
    }

    fn ingest_path(self) -> IngestPath {
        if self == Variant::IoViaOs {
            IngestPath::ViaOs
        } else {
            IngestPath::TrustedDirect
        }
    }

    fn insecure(self) -> bool {
        self == Variant::Insecure
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub workers: usize,
    /// Events per ingestion batch.
    pub batch_size: usize,
    pub variant: Variant,
    pub strict_gate: bool,
    pub hints: bool,
    /// Backpressure high-water mark on resident data-plane bytes.
    pub backpressure_high: u64,
    pub target_delay_us: Option<u64>,
    pub alloc: AllocConfig,
    pub encrypt_log: bool,
    pub flush_period_us: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            workers: 4,
            batch_size: 100_000,
            variant: Variant::Sbt,
            strict_gate: false,
            hints: true,
            backpressure_high: 512 * 1024 * 1024,
            target_delay_us: None,
            alloc: AllocConfig::default(),
            encrypt_log: false,
            flush_period_us: 1_000_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("bad engine config: {0}")]
    Config(&'static str),
}

/// Frame supplier; yields (source id, frame) until every source has sent an
/// end frame.
pub trait FrameSource: Send {
    fn next_frame(&mut self) -> Option<(u8, Frame)>;
}

/// One externalized window result, decrypted for capture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EgressCapture {
    pub window: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct RunReport {
    pub events_ingested: u64,
    pub bytes_ingested: u64,
    pub wall_us: u64,
    pub throughput_eps: f64,
    pub throughput_mbps: f64,
    /// (window, output delay µs) per egressed window.
    pub window_delays: Vec<(u64, u64)>,
    pub pending_windows: Vec<u64>,
    pub peak_resident_bytes: u64,
    pub bytes_copied_ingress: u64,
    pub late_drops: u64,
    pub audit_records: u64,
    pub audit_raw_bytes: u64,
    pub block_bytes: u64,
    pub blocks: u64,
    pub compression_ratio: f64,
    pub records_per_sec: f64,
    /// Fraction of worker busy time spent producing and encoding audit
    /// records.
    pub audit_cpu_fraction: f64,
    pub worker_busy_nanos: u64,
    pub counters: DebugCounters,
    pub error: Option<String>,
    #[serde(skip)]
    pub egress: Vec<EgressCapture>,
    /// The `.sbtlog` stream (block envelopes).
    #[serde(skip)]
    pub log: Vec<u8>,
}

/// Hysteretic ingestion gate: closes above the high-water mark, reopens
/// below high minus a quarter.
#[derive(Debug, Clone)]
pub struct BackpressureGate {
    high: u64,
    low: u64,
    closed: bool,
    transitions: u64,
}

impl BackpressureGate {
    pub fn new(high: u64) -> Self {
        BackpressureGate {
            high,
            low: high - high / 4,
            closed: false,
            transitions: 0,
        }
    }

    /// Feeds a resident-bytes observation; returns whether ingestion is open.
    pub fn update(&mut self, resident: u64) -> bool {
        if self.closed {
            if resident < self.low {
                self.closed = false;
                self.transitions += 1;
            }
        } else if resident > self.high {
            self.closed = true;
            self.transitions += 1;
        }
        !self.closed
    }

    pub fn is_open(&self) -> bool {
        !self.closed
    }

    pub fn transitions(&self) -> u64 {
        self.transitions
    }
}

enum Task {
    Segment {
        sid: u8,
        seq: u64,
        token: OpaqueRef,
        wm: i64,
    },
    Eager {
        sid: u8,
        seq: u64,
        stage: usize,
        token: OpaqueRef,
        window: u64,
        remaining: Arc<AtomicUsize>,
    },
    Close {
        window: u64,
        states: [Vec<OpaqueRef>; 2],
        trigger: OpaqueRef,
        stamp: u64,
        consume_wm: bool,
    },
}

struct TaskQueue {
    inner: Mutex<(VecDeque<Task>, bool)>,
    cond: Condvar,
}

impl TaskQueue {
    fn new() -> Self {
        TaskQueue {
            inner: Mutex::new((VecDeque::new(), false)),
            cond: Condvar::new(),
        }
    }

    fn push(&self, t: Task) {
        let mut g = self.inner.lock().unwrap();
        g.0.push_back(t);
        self.cond.notify_one();
    }

    fn pop(&self) -> Option<Task> {
        let mut g = self.inner.lock().unwrap();
        loop {
            if let Some(t) = g.0.pop_front() {
                return Some(t);
            }
            if g.1 {
                return None;
            }
            g = self.cond.wait(g).unwrap();
        }
    }

    fn close(&self) {
        self.inner.lock().unwrap().1 = true;
        self.cond.notify_all();
    }
}

struct WinState {
    states: [BTreeMap<u64, OpaqueRef>; 2],
    last_state: [Option<OpaqueRef>; 2],
}

impl Default for WinState {
    fn default() -> Self {
        WinState {
            states: [BTreeMap::new(), BTreeMap::new()],
            last_state: [None, None],
        }
    }
}

struct CloseWait {
    threshold: i64,
    trigger: OpaqueRef,
    stamp: u64,
    barriers: [u64; 2],
}

struct Book {
    latest_wm: [Option<i64>; 2],
    ingested_batches: [u64; 2],
    /// Batches complete out of order across workers; a watermark's barrier
    /// is only met once the contiguous prefix of batches ingested before it
    /// has fully finished its batch stages.
    completed_prefix: [u64; 2],
    completed_set: [HashSet<u64>; 2],
    windows: BTreeMap<u64, WinState>,
    waiting: VecDeque<CloseWait>,
    closed: HashSet<u64>,
    ingest_done: bool,
}

impl Book {
    fn note_batch_complete(&mut self, sid: u8, seq: u64) {
        let s = sid as usize;
        self.completed_set[s].insert(seq);
        while self.completed_set[s].remove(&self.completed_prefix[s]) {
            self.completed_prefix[s] += 1;
        }
    }
}

struct Shared {
    plan: Plan,
    cfg: EngineConfig,
    gate: Gate,
    io: IoGateway,
    queue: TaskQueue,
    book: Mutex<Book>,
    outstanding: AtomicUsize,
    egress_lock: Mutex<()>,
    egress: Mutex<Vec<EgressCapture>>,
    delays: Mutex<Vec<(u64, u64)>>,
    error: Mutex<Option<String>>,
    stop: AtomicBool,
    worker_nanos: AtomicU64,
    events: AtomicU64,
    bytes: AtomicU64,
}

impl Shared {
    fn abort(&self, msg: String) {
        let mut e = self.error.lock().unwrap();
        if e.is_none() {
            *e = Some(msg);
        }
        self.stop.store(true, Ordering::Release);
        self.queue.close();
    }

    fn clock(&self) -> &ProcClock {
        self.gate.clock()
    }

    fn push_task(&self, t: Task) {
        self.outstanding.fetch_add(1, Ordering::AcqRel);
        self.queue.push(t);
    }

    /// Dispatches every close whose watermark arrived and whose prior
    /// batches all finished their batch stages. Call with the book locked.
    fn fire_ready(&self, book: &mut Book) {
        loop {
            let ready = match book.waiting.front() {
                Some(w) => (0..self.plan.sources)
                    .all(|s| book.completed_prefix[s] >= w.barriers[s]),
                None => break,
            };
            if !ready {
                break;
            }
            let wait = book.waiting.pop_front().unwrap();
            let width = self.plan.width_us;
            let closable: Vec<u64> = book
                .windows
                .iter()
                .filter(|(w, st)| {
                    (**w as i64 + 1) * width <= wait.threshold
                        && !book.closed.contains(w)
                        && (!st.states[0].is_empty() || !st.states[1].is_empty())
                })
                .map(|(w, _)| *w)
                .collect();
            let uses = closable.len();
            for w in closable {
                book.closed.insert(w);
                let st = book.windows.remove(&w).unwrap();
                let states = [
                    st.states[0].values().copied().collect::<Vec<_>>(),
                    st.states[1].values().copied().collect::<Vec<_>>(),
                ];
                self.push_task(Task::Close {
                    window: w,
                    states,
                    trigger: wait.trigger,
                    stamp: wait.stamp,
                    // A trigger shared by several windows stays alive; the
                    // zero-length watermark array costs no resident memory.
                    consume_wm: uses == 1,
                });
            }
        }
    }

    fn register_state(&self, book: &mut Book, sid: u8, window: u64, seq: u64, token: OpaqueRef) {
        debug_assert!(
            !book.closed.contains(&window),
            "state registered for closed window {}",
            window
        );
        let st = book.windows.entry(window).or_default();
        st.states[sid as usize].insert(seq, token);
        st.last_state[sid as usize] = Some(token);
    }

    fn batch_completed(&self, sid: u8, seq: u64) {
        let mut book = self.book.lock().unwrap();
        book.note_batch_complete(sid, seq);
        self.fire_ready(&mut book);
    }

    fn maybe_finish(&self) {
        if self.outstanding.load(Ordering::Acquire) != 0 {
            return;
        }
        let book = self.book.lock().unwrap();
        // All batches complete once outstanding hits zero after ingest, so
        // every wait has fired; any leftover would mean a scheduling bug.
        debug_assert!(!book.ingest_done || book.waiting.is_empty());
        if book.ingest_done && self.outstanding.load(Ordering::Acquire) == 0 {
            self.queue.close();
        }
    }

    fn run_task(&self, task: Task) {
        let result = match task {
            Task::Segment { sid, seq, token, wm } => self.do_segment(sid, seq, token, wm),
            Task::Eager {
                sid,
                seq,
                stage,
                token,
                window,
                remaining,
            } => self.do_eager(sid, seq, stage, token, window, remaining),
            Task::Close {
                window,
                states,
                trigger,
                stamp,
                consume_wm,
            } => self.do_close(window, states, trigger, stamp, consume_wm),
        };
        if let Err(e) = result {
            self.abort(format!("task failed: {}", e));
        }
    }

    fn do_segment(&self, sid: u8, seq: u64, token: OpaqueRef, wm: i64) -> Result<(), IoError> {
        let mut req = GateRequest::new(PrimitiveId::Segment, vec![token]);
        req.params = PrimParams::Segment {
            width_us: self.plan.width_us,
            watermark: wm,
        };
        req.out_kind = ArrayKind::State;
        if self.cfg.hints {
            req.hints.push(ConsumptionHint::Parallel {
                k: (self.cfg.workers as u32).max(2),
            });
        }
        let resp = self.gate.invoke(req).map_err(IoError::Gate)?;
        if self.plan.eager.is_empty() {
            {
                let mut book = self.book.lock().unwrap();
                for (out, w) in &resp.outputs {
                    let w = w.expect("segment outputs are windowed");
                    self.register_state(&mut book, sid, w, seq, *out);
                }
            }
            self.batch_completed(sid, seq);
        } else if resp.outputs.is_empty() {
            self.batch_completed(sid, seq);
        } else {
            let remaining = Arc::new(AtomicUsize::new(resp.outputs.len()));
            for (out, w) in resp.outputs {
                self.push_task(Task::Eager {
                    sid,
                    seq,
                    stage: 0,
                    token: out,
                    window: w.expect("segment outputs are windowed"),
                    remaining: remaining.clone(),
                });
            }
        }
        Ok(())
    }

    fn eager_request(&self, stage: usize, token: OpaqueRef) -> GateRequest {
        let op = self.plan.eager[stage];
        let mut req = match op {
            crate::model::EagerOp::Sort => GateRequest::new(PrimitiveId::Sort, vec![token]),
            crate::model::EagerOp::FilterBand { lo, hi } => {
                let mut r = GateRequest::new(PrimitiveId::FilterBand, vec![token]);
                r.params = PrimParams::FilterBand { lo, hi };
                r
            }
        };
        req.out_kind = ArrayKind::State;
        req
    }

    fn do_eager(
        &self,
        sid: u8,
        seq: u64,
        stage: usize,
        token: OpaqueRef,
        window: u64,
        remaining: Arc<AtomicUsize>,
    ) -> Result<(), IoError> {
        let mut req = self.eager_request(stage, token);
        let last_stage = stage + 1 == self.plan.eager.len();
        if last_stage && self.cfg.hints {
            let prev = {
                let book = self.book.lock().unwrap();
                book.windows
                    .get(&window)
                    .and_then(|st| st.last_state[sid as usize])
            };
            if let Some(prev) = prev {
                // The new state array will be consumed right after its
                // predecessor when the window closes.
                req.hints.push(ConsumptionHint::After {
                    first: HintRef::Token(prev),
                    second: HintRef::Output(0),
                });
            }
        }
        let resp = self.gate.invoke(req).map_err(IoError::Gate)?;
        let out = resp.outputs[0].0;
        if !last_stage {
            self.push_task(Task::Eager {
                sid,
                seq,
                stage: stage + 1,
                token: out,
                window,
                remaining,
            });
            return Ok(());
        }
        {
            let mut book = self.book.lock().unwrap();
            self.register_state(&mut book, sid, window, seq, out);
        }
        if remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.batch_completed(sid, seq);
        }
        Ok(())
    }

    fn do_close(
        &self,
        window: u64,
        states: [Vec<OpaqueRef>; 2],
        trigger: OpaqueRef,
        stamp: u64,
        consume_wm: bool,
    ) -> Result<(), IoError> {
        let chain = self
            .plan
            .close_chain([states[0].len(), states[1].len()]);
        let mut carry: [Option<OpaqueRef>; 2] = [None, None];
        for side in 0..2 {
            if states[side].len() == 1 {
                carry[side] = Some(states[side][0]);
            }
        }
        let mut prev: Option<OpaqueRef> = None;
        let mut result: Option<OpaqueRef> = None;
        for step in &chain {
            let mut inputs: Vec<OpaqueRef> = match step.input {
                StepInput::States(s) => states[s as usize].clone(),
                StepInput::Carry(s) => vec![carry[s as usize].expect("carry present")],
                StepInput::Carries => carry.iter().flatten().copied().collect(),
                StepInput::Prev => vec![prev.expect("chain has previous output")],
            };
            if step.takes_watermark {
                inputs.push(trigger);
            }
            let mut consume = vec![true; inputs.len()];
            if step.takes_watermark && !consume_wm {
                *consume.last_mut().unwrap() = false;
            }
            let (primitive, params) = match (step.op, step.prim) {
                (PrimOp::Merge, _) => (PrimitiveId::Merge, PrimParams::None),
                (_, Some(ClosePrim::Join)) => (
                    PrimitiveId::Join,
                    PrimParams::Join {
                        window,
                        has_left: carry[0].is_some(),
                        has_right: carry[1].is_some(),
                    },
                ),
                (_, Some(ClosePrim::Aggregate { kind, grouped })) => (
                    PrimitiveId::Aggregate(kind),
                    PrimParams::Aggregate { grouped },
                ),
                (_, Some(ClosePrim::TopK { k })) => (PrimitiveId::TopK, PrimParams::TopK { k }),
                (_, Some(ClosePrim::Unique)) => (PrimitiveId::Unique, PrimParams::None),
                (_, Some(ClosePrim::Concat)) => (PrimitiveId::Concat, PrimParams::None),
                (op, prim) => unreachable!("bad close step {:?} {:?}", op, prim),
            };
            let req = GateRequest {
                primitive,
                inputs,
                consume,
                params,
                hints: Vec::new(),
                out_kind: ArrayKind::Streaming,
            };
            let resp = self.gate.invoke(req).map_err(IoError::Gate)?;
            let out = resp.outputs[0].0;
            if step.op == PrimOp::Merge {
                if let StepInput::States(s) = step.input {
                    carry[s as usize] = Some(out);
                }
            } else {
                prev = Some(out);
                result = Some(out);
            }
        }
        let result = result.expect("close chain produces a result");

        let _serialized = self.egress_lock.lock().unwrap();
        let eg = self.io.egress_emit(&self.gate, result)?;
        let delay = self.clock().now_us().saturating_sub(stamp);
        self.delays.lock().unwrap().push((window, delay));
        let payload = eg.open()?;
        self.egress.lock().unwrap().push(EgressCapture { window, payload });
        Ok(())
    }
}

/// Drives a compiled plan over a frame source until end-of-stream. Window
/// results are externalized only after their closing watermark; the report
/// carries throughput, per-window output delays, memory and audit metrics,
/// the captured (decrypted) egress payloads, and the audit block log.
pub fn run_pipeline(
    plan: &Plan,
    cfg: &EngineConfig,
    source: Box<dyn FrameSource>,
) -> Result<RunReport, EngineError> {
    if cfg.workers == 0 {
        return Err(EngineError::Config("worker_count must be >= 1"));
    }
    if cfg.batch_size == 0 {
        return Err(EngineError::Config("batch_size must be >= 1"));
    }
    if plan.sources > 2 {
        return Err(EngineError::Config("at most two sources"));
    }

    let clock = ProcClock::new();
    let gate = Gate::init(GateConfig {
        alloc: cfg.alloc,
        strict_gate: cfg.strict_gate,
        insecure: cfg.variant.insecure(),
        clock: clock.clone(),
        token_source: None,
    });
    let io = IoGateway::new(
        cfg.variant.ingest_path(),
        cfg.variant.encrypted_source(),
        !cfg.variant.insecure(),
    );
    let shared = Arc::new(Shared {
        plan: plan.clone(),
        cfg: cfg.clone(),
        gate,
        io,
        queue: TaskQueue::new(),
        book: Mutex::new(Book {
            latest_wm: [None, None],
            ingested_batches: [0, 0],
            completed_prefix: [0, 0],
            completed_set: [HashSet::new(), HashSet::new()],
            windows: BTreeMap::new(),
            waiting: VecDeque::new(),
            closed: HashSet::new(),
            ingest_done: false,
        }),
        outstanding: AtomicUsize::new(0),
        egress_lock: Mutex::new(()),
        egress: Mutex::new(Vec::new()),
        delays: Mutex::new(Vec::new()),
        error: Mutex::new(None),
        stop: AtomicBool::new(false),
        worker_nanos: AtomicU64::new(0),
        events: AtomicU64::new(0),
        bytes: AtomicU64::new(0),
    });

    let mut writer = BlockWriter::new(LOG_KEY, cfg.encrypt_log, cfg.flush_period_us);
    let log_bytes: Mutex<Vec<u8>> = Mutex::new(Vec::new());
    let flush_into = |bytes: &Mutex<Vec<u8>>, block: CompressedBlock| {
        let mut g = bytes.lock().unwrap();
        crate::audit::write_envelope(&mut *g, &block).expect("vec write");
    };

    std::thread::scope(|scope| {
        // Workers.
        for _ in 0..cfg.workers {
            let shared = shared.clone();
            scope.spawn(move || {
                while let Some(task) = shared.queue.pop() {
                    let t0 = std::time::Instant::now();
                    shared.run_task(task);
                    shared
                        .worker_nanos
                        .fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
                    shared.outstanding.fetch_sub(1, Ordering::AcqRel);
                    shared.maybe_finish();
                }
            });
        }

        // Ingestion.
        {
            let shared = shared.clone();
            let mut source = source;
            scope.spawn(move || {
                let mut bp = BackpressureGate::new(shared.cfg.backpressure_high);
                let mut ends = 0usize;
                while !shared.stop.load(Ordering::Acquire) {
                    let Some((sid, frame)) = source.next_frame() else {
                        break;
                    };
                    if sid as usize >= shared.plan.sources {
                        shared.abort(format!("frame for unknown source {}", sid));
                        break;
                    }
                    while !bp.update(shared.gate.mem_stats().resident_bytes) {
                        // Ingestion closed: admitted data is never dropped,
                        // the source simply stalls until memory drains.
                        std::thread::sleep(std::time::Duration::from_micros(200));
                        if shared.stop.load(Ordering::Acquire) {
                            break;
                        }
                    }
                    let plain_len = frame.payload.len() as u64;
                    match shared.io.ingest_frame(
                        &shared.gate,
                        frame,
                        shared.plan.layout,
                        sid,
                        shared.cfg.batch_size,
                    ) {
                        Ok(Ingested::Batches(batches)) => {
                            if !batches.is_empty() {
                                shared.bytes.fetch_add(plain_len, Ordering::Relaxed);
                            }
                            for (token, n) in batches {
                                shared.events.fetch_add(n, Ordering::Relaxed);
                                let (seq, wm) = {
                                    let mut book = shared.book.lock().unwrap();
                                    let seq = book.ingested_batches[sid as usize];
                                    book.ingested_batches[sid as usize] += 1;
                                    (seq, book.latest_wm[sid as usize].unwrap_or(i64::MIN))
                                };
                                shared.push_task(Task::Segment {
                                    sid,
                                    seq,
                                    token,
                                    wm,
                                });
                            }
                        }
                        Ok(Ingested::Watermark { token, value, .. }) => {
                            let stamp = shared.clock().now_us();
                            let mut book = shared.book.lock().unwrap();
                            book.latest_wm[sid as usize] = Some(value);
                            let threshold = (0..shared.plan.sources)
                                .map(|s| book.latest_wm[s])
                                .min()
                                .flatten();
                            if let Some(threshold) = threshold {
                                let barriers = [book.ingested_batches[0], book.ingested_batches[1]];
                                book.waiting.push_back(CloseWait {
                                    threshold,
                                    trigger: token,
                                    stamp,
                                    barriers,
                                });
                                shared.fire_ready(&mut book);
                            }
                        }
                        Ok(Ingested::End) => {
                            ends += 1;
                            if ends >= shared.plan.sources {
                                break;
                            }
                        }
                        Err(e) => {
                            shared.abort(format!("source failure: {}", e));
                            break;
                        }
                    }
                }
                shared.book.lock().unwrap().ingest_done = true;
                shared.maybe_finish();
            });
        }

        // Flusher: drains the audit buffer into blocks, promptly after
        // egress, otherwise once per period.
        {
            let shared = shared.clone();
            let writer = &mut writer;
            let log_bytes = &log_bytes;
            scope.spawn(move || loop {
                if let Some(block) =
                    writer.flush_block(shared.clock().now_us(), shared.gate.log())
                {
                    flush_into(log_bytes, block);
                }
                if shared.queue.inner.lock().unwrap().1 {
                    break;
                }
                std::thread::sleep(std::time::Duration::from_millis(2));
            });
        }
    });

    let counters = shared.gate.finalize();
    if let Some(block) = writer.flush_final(clock.now_us(), shared.gate.log()) {
        flush_into(&log_bytes, block);
    }

    let shared = Arc::into_inner(shared).expect("all threads joined");
    let wall_us = clock.now_us().max(1);
    let events = shared.events.load(Ordering::Relaxed);
    let mut window_delays = shared.delays.into_inner().unwrap();
    window_delays.sort_unstable();
    let mut egress = shared.egress.into_inner().unwrap();
    egress.sort_by_key(|e| e.window);
    let book = shared.book.into_inner().unwrap();
    let pending_windows: Vec<u64> = book
        .windows
        .iter()
        .filter(|(_, st)| !st.states[0].is_empty() || !st.states[1].is_empty())
        .map(|(w, _)| *w)
        .collect();

    let block_bytes = writer.block_bytes();
    let worker_busy = shared.worker_nanos.load(Ordering::Relaxed).max(1);
    let audit_nanos = counters.audit_append_nanos + writer.encode_nanos();
    Ok(RunReport {
        events_ingested: events,
        bytes_ingested: shared.bytes.load(Ordering::Relaxed),
        wall_us,
        throughput_eps: events as f64 / (wall_us as f64 / 1e6),
        throughput_mbps: shared.bytes.load(Ordering::Relaxed) as f64
            / (wall_us as f64 / 1e6)
            / (1024.0 * 1024.0),
        window_delays,
        pending_windows,
        peak_resident_bytes: counters.mem.peak_resident_bytes,
        bytes_copied_ingress: shared.io.bytes_copied(),
        late_drops: counters.late_drops,
        audit_records: counters.audit_records,
        audit_raw_bytes: counters.audit_raw_bytes,
        block_bytes,
        blocks: writer.blocks_emitted(),
        compression_ratio: if block_bytes > 0 {
            counters.audit_raw_bytes as f64 / block_bytes as f64
        } else {
            0.0
        },
        records_per_sec: counters.audit_records as f64 / (wall_us as f64 / 1e6),
        audit_cpu_fraction: audit_nanos as f64 / worker_busy as f64,
        worker_busy_nanos: worker_busy,
        counters,
        error: shared.error.into_inner().unwrap(),
        egress,
        log: log_bytes.into_inner().unwrap(),
    })
}

/// Egress payload schema for a plan's results (what `egress` captures hold).
pub fn result_schema(plan: &Plan) -> Schema {
    match *plan.close.last().unwrap() {
        ClosePrim::Aggregate { kind, grouped } => match (kind, grouped) {
            (crate::model::AggKind::Sum | crate::model::AggKind::Count, true) => Schema::KeyI64,
            (crate::model::AggKind::SumCnt, true) => Schema::KeySumCnt,
            (crate::model::AggKind::Avg, true) => {
                if plan.layout == crate::model::EventLayout::FourField {
                    Schema::KeyF64Ex
                } else {
                    Schema::KeyF64
                }
            }
            (crate::model::AggKind::Median, true) => Schema::KeyI32,
            (crate::model::AggKind::AboveAvgCount, _) => Schema::KeyI64,
            (crate::model::AggKind::Sum | crate::model::AggKind::Count, false) => Schema::I64,
            (crate::model::AggKind::Avg, false) => Schema::F64,
            (crate::model::AggKind::Median, false) => Schema::I32,
            (crate::model::AggKind::SumCnt, false) => Schema::I64I64,
        },
        ClosePrim::TopK { .. } => Schema::Events(plan.layout),
        ClosePrim::Unique => Schema::I32,
        ClosePrim::Concat => Schema::Events(plan.layout),
        ClosePrim::Join => Schema::JoinRow,
    }
}
