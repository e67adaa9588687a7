//! Cloud-side attestation. Blocks are authenticated, then the record stream
//! is replayed symbolically — no event payloads, only identifiers — against
//! a local copy of the pipeline plan. Correctness holds when every ingested
//! batch is fully segmented and every closed window's state flows through
//! exactly the expected primitive chain into an egress. Freshness walks the
//! derived-from chain from each egress back to the watermark that triggered
//! it.
//!
//! Record interleaving across engine threads is tolerated: inputs are
//! matched as multisets per chain step, and the trigger watermark of a
//! window is recomputed from watermark arrival order rather than record
//! adjacency.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use crate::audit::{decode_log_stream, AuditRecord, CodecError, RecordKind};
use crate::model::{CloseStep, Plan, PrimOp, StepInput};
use crate::util::fnv1a32;

#[derive(Debug, Clone, serde::Serialize)]
pub struct CorrectnessReport {
    pub pass: bool,
    pub violations: Vec<String>,
    pub pending_windows: Vec<u64>,
    pub replayed_records: u64,
    pub reject_records: u64,
    pub late_drops: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EgressDelay {
    pub window: Option<u64>,
    pub result_id: u64,
    /// Egress timestamp minus trigger-watermark ingress timestamp; `None`
    /// when no watermark is reachable (UNATTRIBUTABLE).
    pub delay_us: Option<u64>,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct FreshnessReport {
    pub delays: Vec<EgressDelay>,
    pub unattributable: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct VerdictReport {
    pub pass: bool,
    pub correctness: CorrectnessReport,
    pub freshness: FreshnessReport,
    pub hint_anomalies: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    /// Between eager stages `i-1` and `i`; `Eager(plan.eager.len())` is
    /// ready for the close chain.
    Eager(usize),
    ChainProduct,
    Result,
}

#[derive(Debug, Clone, Copy)]
struct Arr {
    window: u64,
    side: u8,
    stage: Stage,
    consumed: bool,
}

struct SourceBatch {
    count: u64,
    seg_sum: u64,
    drops: u64,
}

struct WmInfo {
    ts: u64,
}

struct WinV {
    ready: [Vec<u64>; 2],
    expected: Option<Vec<CloseStep>>,
    step: usize,
    carry: [Option<u64>; 2],
    prev: Option<u64>,
    result: Option<u64>,
    egressed: bool,
    /// Last eager-output id per side, in record order, for hint prediction.
    last_state: [Option<u64>; 2],
}

impl Default for WinV {
    fn default() -> Self {
        WinV {
            ready: [Vec::new(), Vec::new()],
            expected: None,
            step: 0,
            carry: [None, None],
            prev: None,
            result: None,
            egressed: false,
            last_state: [None, None],
        }
    }
}

/// Symbolic replay state over one audit stream.
pub struct ReplayState<'p> {
    plan: &'p Plan,
    arrays: HashMap<u64, Arr>,
    known: HashSet<u64>,
    sources: HashMap<u64, SourceBatch>,
    batch_source: HashMap<u64, u8>,
    wms: HashMap<u64, WmInfo>,
    last_wm: [Option<i64>; 2],
    /// (wm id, min over sources after its arrival).
    wm_arrivals: Vec<(u64, Option<i64>)>,
    windows: BTreeMap<u64, WinV>,
    violations: Vec<String>,
    rejects: u64,
    late_drops: u64,
    hint_anomalies: u64,
    producers: HashMap<u64, usize>,
    egresses: Vec<(u64, u64)>,
    records: Vec<AuditRecord>,
}

const MAX_VIOLATIONS: usize = 16;

impl<'p> ReplayState<'p> {
    pub fn new(plan: &'p Plan) -> Self {
        ReplayState {
            plan,
            arrays: HashMap::new(),
            known: HashSet::new(),
            sources: HashMap::new(),
            batch_source: HashMap::new(),
            wms: HashMap::new(),
            last_wm: [None, None],
            wm_arrivals: Vec::new(),
            windows: BTreeMap::new(),
            violations: Vec::new(),
            rejects: 0,
            late_drops: 0,
            hint_anomalies: 0,
            producers: HashMap::new(),
            egresses: Vec::new(),
            records: Vec::new(),
        }
    }

    fn violate(&mut self, msg: String) {
        if self.violations.len() < MAX_VIOLATIONS {
            self.violations.push(msg);
        }
    }

    fn introduce(&mut self, id: u64, idx: usize) -> bool {
        if !self.known.insert(id) {
            self.violate(format!("id {:#x} introduced twice", id));
            return false;
        }
        self.producers.insert(id, idx);
        true
    }

    /// First watermark whose arrival pushed the cross-source minimum past the
    /// end of window `w`.
    fn trigger_of(&self, w: u64) -> Option<u64> {
        let end = (w as i64 + 1) * self.plan.width_us;
        self.wm_arrivals
            .iter()
            .find(|(_, m)| m.is_some_and(|m| m >= end))
            .map(|(id, _)| *id)
    }

    pub fn replay(&mut self, rec: &AuditRecord) {
        let idx = self.records.len();
        self.records.push(rec.clone());
        let rec = &self.records[idx];

        // Every referenced id must have been introduced earlier.
        for id in &rec.inputs {
            if !self.known.contains(id) {
                let msg = format!("record {} references unknown id {:#x}", idx, id);
                self.violate(msg);
                return;
            }
        }

        match rec.kind {
            RecordKind::Ingress => self.replay_ingress(idx),
            RecordKind::Wnd => self.replay_wnd(idx),
            RecordKind::Drop => self.replay_drop(idx),
            RecordKind::Exec => self.replay_exec(idx),
            RecordKind::Egress => self.replay_egress(idx),
            RecordKind::Reject => self.rejects += 1,
        }
    }

    fn replay_ingress(&mut self, idx: usize) {
        let rec = self.records[idx].clone();
        if rec.outputs.len() != 1 {
            self.violate(format!("ingress record {} must introduce one id", idx));
            return;
        }
        let id = rec.outputs[0];
        if !self.introduce(id, idx) {
            return;
        }
        let source = rec.source.unwrap_or(0);
        if source as usize >= self.plan.sources {
            self.violate(format!("ingress record {} names unknown source", idx));
            return;
        }
        match rec.watermark_value {
            Some(v) => {
                if self.last_wm[source as usize].is_some_and(|prev| v <= prev) {
                    self.violate(format!(
                        "watermark {:#x} not strictly increasing on source {}",
                        id, source
                    ));
                    return;
                }
                self.last_wm[source as usize] = Some(v);
                let min = (0..self.plan.sources)
                    .map(|s| self.last_wm[s])
                    .min()
                    .flatten();
                self.wms.insert(id, WmInfo { ts: rec.ts });
                self.wm_arrivals.push((id, min));
            }
            None => {
                self.sources.insert(
                    id,
                    SourceBatch {
                        count: rec.count,
                        seg_sum: 0,
                        drops: 0,
                    },
                );
                self.batch_source.insert(id, source);
            }
        }
    }

    fn replay_wnd(&mut self, idx: usize) {
        let rec = self.records[idx].clone();
        if rec.op != Some(PrimOp::Segment) || rec.inputs.len() != 1 || rec.outputs.len() != 1 {
            self.violate(format!("malformed window record {}", idx));
            return;
        }
        let src = rec.inputs[0];
        let Some(w) = rec.window_no else {
            self.violate(format!("window record {} lacks a window", idx));
            return;
        };
        let side = match self.batch_source.get(&src) {
            Some(s) => *s,
            None => {
                self.violate(format!(
                    "window record {} input {:#x} is not a source batch",
                    idx, src
                ));
                return;
            }
        };
        {
            let batch = self.sources.get_mut(&src).unwrap();
            batch.seg_sum += rec.count;
            if batch.seg_sum + batch.drops > batch.count {
                let msg = format!(
                    "batch {:#x} segmented into more events than ingested",
                    src
                );
                self.violate(msg);
                return;
            }
        }
        let out = rec.outputs[0];
        if !self.introduce(out, idx) {
            return;
        }
        self.arrays.insert(
            out,
            Arr {
                window: w,
                side,
                stage: Stage::Eager(0),
                consumed: false,
            },
        );
        let win = self.windows.entry(w).or_default();
        if self.plan.eager.is_empty() {
            win.ready[side as usize].push(out);
            win.last_state[side as usize] = Some(out);
        }
        // Hint prediction: a hinted segmenting invocation carries the
        // constant consumed-in-parallel digest.
        if let Some(d) = rec.hint_digest {
            if d != fnv1a32(&[2u8]) {
                self.hint_anomalies += 1;
            }
        }
    }

    fn replay_drop(&mut self, idx: usize) {
        let rec = self.records[idx].clone();
        if rec.inputs.len() != 1 {
            self.violate(format!("malformed drop record {}", idx));
            return;
        }
        let src = rec.inputs[0];
        match self.sources.get_mut(&src) {
            Some(batch) => {
                batch.drops += rec.count;
                self.late_drops += rec.count;
                if batch.seg_sum + batch.drops > batch.count {
                    let msg =
                        format!("batch {:#x} accounted for more events than ingested", src);
                    self.violate(msg);
                }
            }
            None => {
                self.violate(format!("drop record {} on non-batch {:#x}", idx, src));
            }
        }
    }

    fn replay_exec(&mut self, idx: usize) {
        let rec = self.records[idx].clone();
        let Some(op) = rec.op else {
            self.violate(format!("exec record {} lacks an op", idx));
            return;
        };
        // Eager (per-batch) stage?
        if let Some(stage) = self
            .plan
            .eager
            .iter()
            .position(|e| e.prim_op() == op)
        {
            self.replay_eager(idx, stage);
            return;
        }
        self.replay_close(idx);
    }

    fn replay_eager(&mut self, idx: usize, stage: usize) {
        let rec = self.records[idx].clone();
        if rec.inputs.len() != 1 || rec.outputs.len() != 1 {
            self.violate(format!("eager exec {} must be one-in one-out", idx));
            return;
        }
        let input = rec.inputs[0];
        let arr = match self.arrays.get(&input) {
            Some(a) => *a,
            None => {
                self.violate(format!("exec {} input {:#x} is not a state array", idx, input));
                return;
            }
        };
        if arr.consumed {
            self.violate(format!("exec {} consumes {:#x} twice", idx, input));
            return;
        }
        if arr.stage != Stage::Eager(stage) {
            self.violate(format!(
                "exec {} applies {:?} at the wrong stage for {:#x}",
                idx,
                rec.op.unwrap(),
                input
            ));
            return;
        }
        if rec.window_no.is_some() && rec.window_no != Some(arr.window) {
            self.violate(format!("exec {} window does not match its input", idx));
            return;
        }
        self.arrays.get_mut(&input).unwrap().consumed = true;
        let out = rec.outputs[0];
        if !self.introduce(out, idx) {
            return;
        }
        let next = stage + 1;
        self.arrays.insert(
            out,
            Arr {
                window: arr.window,
                side: arr.side,
                stage: Stage::Eager(next),
                consumed: false,
            },
        );
        // A consumed-after hint must chain the new state behind some state of
        // the same window and side whose record appeared earlier; the exact
        // predecessor depends on worker interleaving, so membership in the
        // prior-state set is the checkable claim.
        let plausible: Vec<u64> = {
            let win = self.windows.entry(arr.window).or_default();
            win.ready[arr.side as usize].clone()
        };
        if let Some(d) = rec.hint_digest {
            let ok = plausible.iter().any(|p| {
                let mut canon = vec![1u8];
                canon.extend_from_slice(&p.to_le_bytes());
                canon.push(0);
                fnv1a32(&canon) == d
            });
            if !ok {
                self.hint_anomalies += 1;
            }
        }
        {
            let win = self.windows.get_mut(&arr.window).unwrap();
            if next == self.plan.eager.len() {
                win.ready[arr.side as usize].push(out);
                win.last_state[arr.side as usize] = Some(out);
            }
        }
    }

    fn replay_close(&mut self, idx: usize) {
        let rec = self.records[idx].clone();
        let op = rec.op.unwrap();
        let Some(w) = rec.window_no else {
            self.violate(format!("close exec {} lacks a window", idx));
            return;
        };
        if rec.hint_digest.is_some() {
            self.hint_anomalies += 1;
        }

        // Split inputs into data and watermark references.
        let mut data_ids = Vec::new();
        let mut wm_ids = Vec::new();
        for id in &rec.inputs {
            if self.wms.contains_key(id) {
                wm_ids.push(*id);
            } else {
                data_ids.push(*id);
            }
        }

        let ready_lens = {
            let win = self.windows.entry(w).or_default();
            [win.ready[0].len(), win.ready[1].len()]
        };
        let trigger = self.trigger_of(w);
        // Borrow dance: compute the expected chain before touching the entry.
        let expected_chain = self.plan.close_chain(ready_lens);
        let win = self.windows.get_mut(&w).unwrap();
        if win.expected.is_none() {
            if trigger.is_none() {
                self.violate(format!(
                    "window {} close chain started before a closing watermark",
                    w
                ));
                return;
            }
            if expected_chain.is_empty() {
                self.violate(format!("close exec {} for empty window {}", idx, w));
                return;
            }
            win.expected = Some(expected_chain);
            for side in 0..2 {
                if win.ready[side].len() == 1 {
                    win.carry[side] = Some(win.ready[side][0]);
                }
            }
        }
        let expected = win.expected.clone().unwrap();
        if win.step >= expected.len() {
            self.violate(format!("window {} has extra executions after its chain", w));
            return;
        }
        let step = expected[win.step];
        if step.op != op {
            self.violate(format!(
                "window {} expected {} but saw {}",
                w,
                step.op.name(),
                op.name()
            ));
            return;
        }

        let win = self.windows.get(&w).unwrap();
        let expected_data: Vec<u64> = match step.input {
            StepInput::States(s) => win.ready[s as usize].clone(),
            StepInput::Carry(s) => vec![win.carry[s as usize].expect("carry set")],
            StepInput::Carries => win.carry.iter().flatten().copied().collect(),
            StepInput::Prev => vec![win.prev.expect("prev set")],
        };
        let mut want = expected_data.clone();
        want.sort_unstable();
        let mut got = data_ids.clone();
        got.sort_unstable();
        if want != got {
            self.violate(format!(
                "window {} step {} consumed the wrong input set",
                w,
                step.op.name()
            ));
            return;
        }
        if step.takes_watermark {
            if wm_ids.len() != 1 || Some(wm_ids[0]) != trigger {
                self.violate(format!(
                    "window {} step {} is not triggered by its closing watermark",
                    w,
                    step.op.name()
                ));
                return;
            }
        } else if !wm_ids.is_empty() {
            self.violate(format!(
                "window {} step {} unexpectedly references a watermark",
                w,
                step.op.name()
            ));
            return;
        }

        // Consume the data inputs, verifying stage and window tags.
        for id in &data_ids {
            let arr = match self.arrays.get(id) {
                Some(a) => *a,
                None => {
                    self.violate(format!("close step consumes unknown array {:#x}", id));
                    return;
                }
            };
            if arr.consumed {
                self.violate(format!("close step consumes {:#x} twice", id));
                return;
            }
            if arr.window != w {
                self.violate(format!(
                    "window {} consumes array {:#x} belonging to window {}",
                    w, id, arr.window
                ));
                return;
            }
        }
        for id in &data_ids {
            self.arrays.get_mut(id).unwrap().consumed = true;
        }

        if rec.outputs.len() != 1 {
            self.violate(format!("close exec {} must produce one output", idx));
            return;
        }
        let out = rec.outputs[0];
        if !self.introduce(out, idx) {
            return;
        }
        let last = {
            let win = self.windows.get_mut(&w).unwrap();
            win.step += 1;
            let last = win.step == expected.len();
            if step.op == PrimOp::Merge {
                if let StepInput::States(s) = step.input {
                    win.carry[s as usize] = Some(out);
                }
            } else {
                win.prev = Some(out);
            }
            if last {
                win.result = Some(out);
            }
            last
        };
        self.arrays.insert(
            out,
            Arr {
                window: w,
                side: 0,
                stage: if last { Stage::Result } else { Stage::ChainProduct },
                consumed: false,
            },
        );
    }

    fn replay_egress(&mut self, idx: usize) {
        let rec = self.records[idx].clone();
        if rec.inputs.len() != 1 {
            self.violate(format!("egress record {} must name one result", idx));
            return;
        }
        let id = rec.inputs[0];
        let arr = match self.arrays.get(&id) {
            Some(a) => *a,
            None => {
                self.violate(format!("egress of unknown array {:#x}", id));
                return;
            }
        };
        if arr.consumed || arr.stage != Stage::Result {
            self.violate(format!("egress of non-result array {:#x}", id));
            return;
        }
        let win = self.windows.get_mut(&arr.window).unwrap();
        if win.egressed {
            self.violate(format!("window {} externalized twice", arr.window));
            return;
        }
        win.egressed = true;
        self.arrays.get_mut(&id).unwrap().consumed = true;
        self.egresses.push((id, rec.ts));
    }

    /// End-of-stream checks. `strict` treats the stream as a complete run:
    /// every batch fully segmented and every closed window externalized.
    pub fn finalize(&mut self, strict: bool) -> (Vec<String>, Vec<u64>) {
        if strict {
            let mut incomplete: Vec<u64> = self
                .sources
                .iter()
                .filter(|(_, b)| b.seg_sum + b.drops != b.count)
                .map(|(id, _)| *id)
                .collect();
            incomplete.sort_unstable();
            for id in incomplete {
                self.violate(format!("batch {:#x} not fully segmented", id));
            }
        }

        // A window is pending when no watermark has closed it yet but data
        // still sits in it, at whatever stage.
        let mut pending: Vec<u64> = {
            let mut set = std::collections::BTreeSet::new();
            for arr in self.arrays.values() {
                if !arr.consumed && self.trigger_of(arr.window).is_none() {
                    set.insert(arr.window);
                }
            }
            set.into_iter().collect()
        };
        pending.dedup();

        let windows: Vec<u64> = self.windows.keys().copied().collect();
        for w in windows {
            if self.trigger_of(w).is_none() {
                continue;
            }
            if strict {
                let win = &self.windows[&w];
                let complete =
                    win.expected.as_ref().is_some_and(|e| win.step == e.len()) && win.egressed;
                if !complete {
                    self.violate(format!("window {} closed but not fully processed", w));
                }
            }
        }
        if strict {
            // Anything left unconsumed inside a closed window means data
            // escaped its declared processing.
            let mut stragglers: Vec<(u64, u64)> = self
                .arrays
                .iter()
                .filter(|(_, a)| !a.consumed && self.trigger_of(a.window).is_some())
                .map(|(id, a)| (*id, a.window))
                .collect();
            stragglers.sort_unstable();
            for (id, w) in stragglers {
                self.violate(format!(
                    "array {:#x} of closed window {} never consumed",
                    id, w
                ));
            }
        }
        (std::mem::take(&mut self.violations), pending)
    }

    /// Walks derived-from edges backward from each egress to its triggering
    /// watermark.
    pub fn freshness(&self) -> FreshnessReport {
        let mut report = FreshnessReport::default();
        for &(result_id, egress_ts) in &self.egresses {
            let window = self.arrays.get(&result_id).map(|a| a.window);
            let mut best: Option<u64> = None;
            let mut frontier = VecDeque::from([result_id]);
            let mut seen = HashSet::new();
            while let Some(id) = frontier.pop_front() {
                if !seen.insert(id) {
                    continue;
                }
                if let Some(wm) = self.wms.get(&id) {
                    best = Some(best.map_or(wm.ts, |b: u64| b.max(wm.ts)));
                    continue;
                }
                if let Some(&idx) = self.producers.get(&id) {
                    for input in &self.records[idx].inputs {
                        frontier.push_back(*input);
                    }
                }
            }
            let delay_us = best.map(|ts| egress_ts.saturating_sub(ts));
            if delay_us.is_none() {
                report.unattributable += 1;
            }
            report.delays.push(EgressDelay {
                window,
                result_id,
                delay_us,
            });
        }
        report
    }
}

/// Cloud-side verifier bound to one pipeline plan.
pub struct Verifier {
    plan: Plan,
    pub strict: bool,
}

impl Verifier {
    pub fn new(plan: Plan) -> Self {
        Verifier { plan, strict: true }
    }

    /// Replays a decoded record stream and reports correctness, freshness,
    /// and hint anomalies.
    pub fn verify_records(&self, records: &[AuditRecord]) -> VerdictReport {
        let mut state = ReplayState::new(&self.plan);
        for rec in records {
            state.replay(rec);
        }
        let (violations, pending) = state.finalize(self.strict);
        let freshness = state.freshness();
        let pass = violations.is_empty();
        VerdictReport {
            pass,
            correctness: CorrectnessReport {
                pass,
                violations,
                pending_windows: pending,
                replayed_records: records.len() as u64,
                reject_records: state.rejects,
                late_drops: state.late_drops,
            },
            freshness,
            hint_anomalies: state.hint_anomalies,
        }
    }

    /// Authenticates and decodes a `.sbtlog` stream, then verifies it. Any
    /// block failing authentication refuses verification outright.
    pub fn verify_log(&self, log: &[u8], key: &[u8; 32]) -> Result<VerdictReport, CodecError> {
        let records = decode_log_stream(log, key)?;
        Ok(self.verify_records(&records))
    }
}

/// Synthesizes a valid single-source audit stream shaped like a grouped-sum
/// run: per window, one batch is ingested, segmented, sorted, summed on the
/// closing watermark, and externalized.
pub fn synth_grouped_sum_stream(windows: u64, events_per_window: u64) -> Vec<AuditRecord> {
    let width = 1_000_000i64;
    let mut records = Vec::new();
    let mut next_id = 1u64;
    let mut id = || {
        let v = next_id;
        next_id += 1;
        v
    };
    let mut ts = 0u64;
    let mut tick = |n: u64| {
        ts += n;
        ts
    };
    for w in 0..windows {
        let batch = id();
        records.push(AuditRecord::ingress(tick(3), batch, events_per_window, 0));
        let seg = id();
        records.push(AuditRecord {
            ts: tick(2),
            kind: RecordKind::Wnd,
            op: Some(PrimOp::Segment),
            inputs: vec![batch],
            outputs: vec![seg],
            window_no: Some(w),
            count: events_per_window,
            watermark_value: None,
            hint_digest: None,
            source: None,
            code: None,
        });
        let sorted = id();
        records.push(AuditRecord {
            ts: tick(2),
            kind: RecordKind::Exec,
            op: Some(PrimOp::Sort),
            inputs: vec![seg],
            outputs: vec![sorted],
            window_no: Some(w),
            count: events_per_window,
            watermark_value: None,
            hint_digest: None,
            source: None,
            code: None,
        });
        let wm = id();
        records.push(AuditRecord::ingress_watermark(
            tick(2),
            wm,
            (w as i64 + 1) * width,
            0,
        ));
        let summed = id();
        records.push(AuditRecord {
            ts: tick(4),
            kind: RecordKind::Exec,
            op: Some(PrimOp::AggSum),
            inputs: vec![sorted, wm],
            outputs: vec![summed],
            window_no: Some(w),
            count: events_per_window / 2 + 1,
            watermark_value: None,
            hint_digest: None,
            source: None,
            code: None,
        });
        records.push(AuditRecord::egress(tick(3), summed, events_per_window / 2 + 1));
    }
    records
}

/// Plan matching [`synth_grouped_sum_stream`].
pub fn synth_grouped_sum_plan() -> Plan {
    use crate::model::{AggKind, EventLayout, Operator, PipelineDecl};
    let decl = PipelineDecl::chain(&[
        Operator::Ingress,
        Operator::Window { width_us: 1_000_000 },
        Operator::GroupBy,
        Operator::Aggregation { kind: AggKind::Sum },
        Operator::Egress,
    ]);
    Plan::compile(&decl, EventLayout::ThreeField).unwrap()
}

/// Replays `n` synthetic records single-threaded and reports records/sec.
/// Returns 0.0 for an empty stream.
pub fn replay_throughput_selftest(n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let windows = (n as u64).div_ceil(6).max(1);
    let mut records = synth_grouped_sum_stream(windows, 1000);
    records.truncate(n.max(6));
    let plan = synth_grouped_sum_plan();
    let verifier = Verifier {
        plan,
        strict: false,
    };
    let t0 = std::time::Instant::now();
    let verdict = verifier.verify_records(&records);
    let dt = t0.elapsed().as_secs_f64();
    assert!(verdict.pass, "selftest stream must verify");
    records.len() as f64 / dt
}
