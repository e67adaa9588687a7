//! Compilation of a pipeline declaration into the primitive-level execution
//! plan. The engine schedules gate invocations from this plan and the
//! verifier derives the expected audit-record structure from the same plan,
//! so both sides agree by construction.
//!
//! Execution shape: every ingested batch is segmented into per-window state
//! arrays; `eager` primitives run per state array as soon as it exists; when
//! a watermark closes a window, the `close` chain runs over the window's
//! accumulated state and its result is externalized.

use super::pipeline::{AggKind, Operator, PipelineDecl};
use super::{EventLayout, WindowSpec};
use thiserror::Error;

/// Names of trusted primitives as they appear in audit records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PrimOp {
    Sort,
    Merge,
    Segment,
    Join,
    AggSum,
    AggCount,
    AggAvg,
    AggMedian,
    AggSumCnt,
    AggAboveAvgCount,
    TopK,
    Unique,
    FilterBand,
    Concat,
}

impl PrimOp {
    pub fn name(self) -> &'static str {
        match self {
            PrimOp::Sort => "SORT",
            PrimOp::Merge => "MERGE",
            PrimOp::Segment => "WND",
            PrimOp::Join => "JOIN",
            PrimOp::AggSum => "SUM",
            PrimOp::AggCount => "COUNT",
            PrimOp::AggAvg => "AVG",
            PrimOp::AggMedian => "MEDIAN",
            PrimOp::AggSumCnt => "SUMCNT",
            PrimOp::AggAboveAvgCount => "RANK",
            PrimOp::TopK => "TOPK",
            PrimOp::Unique => "UNIQUE",
            PrimOp::FilterBand => "FILTER",
            PrimOp::Concat => "CONCAT",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => PrimOp::Sort,
            1 => PrimOp::Merge,
            2 => PrimOp::Segment,
            3 => PrimOp::Join,
            4 => PrimOp::AggSum,
            5 => PrimOp::AggCount,
            6 => PrimOp::AggAvg,
            7 => PrimOp::AggMedian,
            8 => PrimOp::AggSumCnt,
            9 => PrimOp::AggAboveAvgCount,
            10 => PrimOp::TopK,
            11 => PrimOp::Unique,
            12 => PrimOp::FilterBand,
            13 => PrimOp::Concat,
            _ => return None,
        })
    }
}

impl AggKind {
    pub fn prim_op(self) -> PrimOp {
        match self {
            AggKind::Sum => PrimOp::AggSum,
            AggKind::Count => PrimOp::AggCount,
            AggKind::Avg => PrimOp::AggAvg,
            AggKind::Median => PrimOp::AggMedian,
            AggKind::SumCnt => PrimOp::AggSumCnt,
            AggKind::AboveAvgCount => PrimOp::AggAboveAvgCount,
        }
    }
}

/// Per-batch primitive applied to each window state array as soon as the
/// segmenter produces it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EagerOp {
    Sort,
    FilterBand { lo: i32, hi: i32 },
}

impl EagerOp {
    pub fn prim_op(self) -> PrimOp {
        match self {
            EagerOp::Sort => PrimOp::Sort,
            EagerOp::FilterBand { .. } => PrimOp::FilterBand,
        }
    }
}

/// Primitive in the window-close chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosePrim {
    Aggregate { kind: AggKind, grouped: bool },
    TopK { k: u32 },
    Unique,
    Concat,
    Join,
}

impl ClosePrim {
    pub fn prim_op(self) -> PrimOp {
        match self {
            ClosePrim::Aggregate { kind, .. } => kind.prim_op(),
            ClosePrim::TopK { .. } => PrimOp::TopK,
            ClosePrim::Unique => PrimOp::Unique,
            ClosePrim::Concat => PrimOp::Concat,
            ClosePrim::Join => PrimOp::Join,
        }
    }
}

/// Where a close-chain step takes its data inputs from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepInput {
    /// All registered state arrays of a side, in batch order.
    States(u8),
    /// The side's carry slot: merge output if the side was merged, else its
    /// single state array.
    Carry(u8),
    /// Both sides' carry slots (join); an empty side contributes nothing.
    Carries,
    /// Output of the previous chain step.
    Prev,
}

/// One gate invocation in a window-close chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CloseStep {
    pub op: PrimOp,
    pub prim: Option<ClosePrim>,
    pub input: StepInput,
    /// The triggering watermark's array is appended as the final input.
    pub takes_watermark: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("pipeline declaration invalid: {0}")]
    Invalid(String),
    #[error("unsupported pipeline shape: {0}")]
    Unsupported(String),
    #[error("aggregation above_avg_count requires the four-field event layout")]
    NeedsFourField,
}

/// The compiled execution plan.
#[derive(Debug, Clone)]
pub struct Plan {
    pub layout: EventLayout,
    pub width_us: i64,
    pub sources: usize,
    pub eager: Vec<EagerOp>,
    pub close: Vec<ClosePrim>,
}

impl Plan {
    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec::new(self.width_us)
    }

    /// Compiles a declaration. The same function feeds the engine scheduler
    /// and the verifier's expectations.
    pub fn compile(decl: &PipelineDecl, layout: EventLayout) -> Result<Plan, PlanError> {
        let violations = decl.validate();
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(PlanError::Invalid(msgs.join("; ")));
        }

        let ingresses = decl.ingress_nodes();
        let single_succ = |n: usize| -> Result<usize, PlanError> {
            let succ: Vec<usize> = decl.successors(n).collect();
            if succ.len() != 1 {
                return Err(PlanError::Unsupported(format!(
                    "node `{}` must have exactly one successor",
                    decl.nodes[n].name
                )));
            }
            Ok(succ[0])
        };

        // Each source must pass through a window immediately after ingress.
        let mut widths = Vec::new();
        let mut after_window = Vec::new();
        for &ing in &ingresses {
            let w = single_succ(ing)?;
            match decl.nodes[w].op {
                Operator::Window { width_us } => widths.push(width_us),
                _ => {
                    return Err(PlanError::Unsupported(
                        "ingress must feed a window operator".into(),
                    ))
                }
            }
            after_window.push(single_succ(w)?);
        }
        if widths.windows(2).any(|p| p[0] != p[1]) {
            return Err(PlanError::Unsupported(
                "all sources must use the same window width".into(),
            ));
        }
        let width_us = widths[0];

        if ingresses.len() == 2 {
            if after_window[0] != after_window[1]
                || decl.nodes[after_window[0]].op != Operator::Join
            {
                return Err(PlanError::Unsupported(
                    "two-source pipelines must converge at a join".into(),
                ));
            }
            let out = single_succ(after_window[0])?;
            if decl.nodes[out].op != Operator::Egress {
                return Err(PlanError::Unsupported("join must feed egress".into()));
            }
            return Ok(Plan {
                layout,
                width_us,
                sources: 2,
                eager: vec![EagerOp::Sort],
                close: vec![ClosePrim::Join],
            });
        }
        if ingresses.len() > 2 {
            return Err(PlanError::Unsupported("at most two sources".into()));
        }

        // Single-source: walk the chain after the window.
        let mut ops = Vec::new();
        let mut cur = after_window[0];
        loop {
            let op = decl.nodes[cur].op;
            if op == Operator::Egress {
                break;
            }
            ops.push(op);
            cur = single_succ(cur)?;
        }

        let (eager, close): (Vec<EagerOp>, Vec<ClosePrim>) = match ops.as_slice() {
            [] => (vec![], vec![ClosePrim::Concat]),
            [Operator::Filter { lo, hi }] => (
                vec![EagerOp::FilterBand { lo: *lo, hi: *hi }],
                vec![ClosePrim::Concat],
            ),
            [Operator::Aggregation { kind }] => {
                if *kind == AggKind::AboveAvgCount {
                    return Err(PlanError::Unsupported(
                        "above_avg_count must follow a grouped avg".into(),
                    ));
                }
                (
                    vec![],
                    vec![ClosePrim::Aggregate {
                        kind: *kind,
                        grouped: false,
                    }],
                )
            }
            [Operator::GroupBy, rest @ ..] => {
                let close = match rest {
                    [Operator::Aggregation { kind }] if *kind != AggKind::AboveAvgCount => {
                        vec![ClosePrim::Aggregate {
                            kind: *kind,
                            grouped: true,
                        }]
                    }
                    [Operator::Aggregation { kind: AggKind::Avg }, Operator::Aggregation {
                        kind: AggKind::AboveAvgCount,
                    }] => {
                        if layout != EventLayout::FourField {
                            return Err(PlanError::NeedsFourField);
                        }
                        vec![
                            ClosePrim::Aggregate {
                                kind: AggKind::Avg,
                                grouped: true,
                            },
                            ClosePrim::Aggregate {
                                kind: AggKind::AboveAvgCount,
                                grouped: true,
                            },
                        ]
                    }
                    [Operator::TopK { k }] => vec![ClosePrim::TopK { k: *k }],
                    [Operator::Distinct] => vec![ClosePrim::Unique],
                    _ => {
                        return Err(PlanError::Unsupported(
                            "groupby must feed aggregation, topk, or distinct".into(),
                        ))
                    }
                };
                (vec![EagerOp::Sort], close)
            }
            _ => {
                return Err(PlanError::Unsupported(format!(
                    "operator chain {:?} not supported",
                    ops
                )))
            }
        };

        Ok(Plan {
            layout,
            width_us,
            sources: 1,
            eager,
            close,
        })
    }

    /// Whether the close chain needs key-ordered input (merge of sorted
    /// states) rather than batch-order concatenation semantics.
    fn close_is_grouped(&self) -> bool {
        match self.close[0] {
            ClosePrim::Aggregate { grouped, .. } => grouped,
            ClosePrim::TopK { .. } | ClosePrim::Unique | ClosePrim::Join => true,
            ClosePrim::Concat => false,
        }
    }

    /// Expands the close chain for a window given the number of state arrays
    /// per side. `n_states[1]` is zero for single-source plans. Windows with
    /// no state on any side have no chain at all.
    pub fn close_chain(&self, n_states: [usize; 2]) -> Vec<CloseStep> {
        let mut steps = Vec::new();
        if n_states[0] + n_states[1] == 0 {
            return steps;
        }

        if self.close == [ClosePrim::Join] {
            for side in 0..2u8 {
                if n_states[side as usize] > 1 {
                    steps.push(CloseStep {
                        op: PrimOp::Merge,
                        prim: None,
                        input: StepInput::States(side),
                        takes_watermark: false,
                    });
                }
            }
            steps.push(CloseStep {
                op: PrimOp::Join,
                prim: Some(ClosePrim::Join),
                input: StepInput::Carries,
                takes_watermark: true,
            });
            return steps;
        }

        let grouped = self.close_is_grouped();
        let mut first_input = StepInput::States(0);
        if grouped {
            if n_states[0] > 1 {
                steps.push(CloseStep {
                    op: PrimOp::Merge,
                    prim: None,
                    input: StepInput::States(0),
                    takes_watermark: false,
                });
            }
            first_input = StepInput::Carry(0);
        }
        let last = self.close.len() - 1;
        for (i, prim) in self.close.iter().enumerate() {
            steps.push(CloseStep {
                op: prim.prim_op(),
                prim: Some(*prim),
                input: if i == 0 { first_input } else { StepInput::Prev },
                takes_watermark: i == last,
            });
        }
        steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::pipeline::Operator as Op;

    fn grouped_sum_decl() -> PipelineDecl {
        PipelineDecl::chain(&[
            Op::Ingress,
            Op::Window { width_us: 1_000_000 },
            Op::GroupBy,
            Op::Aggregation { kind: AggKind::Sum },
            Op::Egress,
        ])
    }

    #[test]
    fn grouped_sum_plan() {
        let plan = Plan::compile(&grouped_sum_decl(), EventLayout::ThreeField).unwrap();
        assert_eq!(plan.eager, vec![EagerOp::Sort]);
        assert_eq!(
            plan.close,
            vec![ClosePrim::Aggregate {
                kind: AggKind::Sum,
                grouped: true
            }]
        );

        // Single state array: no merge, SUM takes the carry plus watermark.
        let chain = plan.close_chain([1, 0]);
        assert_eq!(chain.len(), 1);
        assert_eq!(chain[0].op, PrimOp::AggSum);
        assert!(chain[0].takes_watermark);
        assert_eq!(chain[0].input, StepInput::Carry(0));

        // Multiple states: merge first.
        let chain = plan.close_chain([3, 0]);
        assert_eq!(chain[0].op, PrimOp::Merge);
        assert_eq!(chain[1].op, PrimOp::AggSum);
    }

    #[test]
    fn ranked_power_plan_needs_four_field() {
        let decl = PipelineDecl::chain(&[
            Op::Ingress,
            Op::Window { width_us: 1_000_000 },
            Op::GroupBy,
            Op::Aggregation { kind: AggKind::Avg },
            Op::Aggregation {
                kind: AggKind::AboveAvgCount,
            },
            Op::Egress,
        ]);
        assert!(matches!(
            Plan::compile(&decl, EventLayout::ThreeField),
            Err(PlanError::NeedsFourField)
        ));
        let plan = Plan::compile(&decl, EventLayout::FourField).unwrap();
        let chain = plan.close_chain([2, 0]);
        assert_eq!(chain.len(), 3);
        assert_eq!(chain[0].op, PrimOp::Merge);
        assert_eq!(chain[1].op, PrimOp::AggAvg);
        assert!(!chain[1].takes_watermark);
        assert_eq!(chain[2].op, PrimOp::AggAboveAvgCount);
        assert!(chain[2].takes_watermark);
    }

    #[test]
    fn join_plan_merges_per_side() {
        let mut decl = PipelineDecl::default();
        let l = decl.add_node("l", Op::Ingress);
        let r = decl.add_node("r", Op::Ingress);
        let wl = decl.add_node("wl", Op::Window { width_us: 1000 });
        let wr = decl.add_node("wr", Op::Window { width_us: 1000 });
        let j = decl.add_node("j", Op::Join);
        let e = decl.add_node("e", Op::Egress);
        decl.add_edge(l, wl);
        decl.add_edge(r, wr);
        decl.add_edge(wl, j);
        decl.add_edge(wr, j);
        decl.add_edge(j, e);

        let plan = Plan::compile(&decl, EventLayout::ThreeField).unwrap();
        assert_eq!(plan.sources, 2);
        let chain = plan.close_chain([2, 1]);
        assert_eq!(chain.len(), 2);
        assert_eq!(chain[0].op, PrimOp::Merge);
        assert_eq!(chain[0].input, StepInput::States(0));
        assert_eq!(chain[1].op, PrimOp::Join);

        // One-sided window still joins (against the empty side).
        let chain = plan.close_chain([0, 2]);
        assert_eq!(chain.len(), 2);
        // No chain for a fully empty window.
        assert!(plan.close_chain([0, 0]).is_empty());
    }

    #[test]
    fn empty_window_has_no_chain() {
        let plan = Plan::compile(&grouped_sum_decl(), EventLayout::ThreeField).unwrap();
        assert!(plan.close_chain([0, 0]).is_empty());
    }
}
