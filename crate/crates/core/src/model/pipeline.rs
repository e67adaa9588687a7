//! Pipeline declarations: an operator DAG with window specs, shared between
//! the engine and the verifier, loadable from a one-operator-per-line text
//! config (grammar in `docs/formats.md`).

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

/// Aggregation flavors. `AboveAvgCount` groups a keyed-average array by its
/// carried extra field and counts keys whose average exceeds the mean of all
/// key averages, emitting groups ranked by that count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum AggKind {
    Sum,
    Count,
    Avg,
    Median,
    SumCnt,
    AboveAvgCount,
}

impl AggKind {
    pub fn name(self) -> &'static str {
        match self {
            AggKind::Sum => "sum",
            AggKind::Count => "count",
            AggKind::Avg => "avg",
            AggKind::Median => "median",
            AggKind::SumCnt => "sumcnt",
            AggKind::AboveAvgCount => "above_avg_count",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sum" => AggKind::Sum,
            "count" => AggKind::Count,
            "avg" => AggKind::Avg,
            "median" => AggKind::Median,
            "sumcnt" => AggKind::SumCnt,
            "above_avg_count" => AggKind::AboveAvgCount,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Ingress,
    Window { width_us: i64 },
    GroupBy,
    Aggregation { kind: AggKind },
    Join,
    Filter { lo: i32, hi: i32 },
    Distinct,
    TopK { k: u32 },
    Egress,
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operator::Ingress => write!(f, "ingress"),
            Operator::Window { width_us } => write!(f, "window {}us", width_us),
            Operator::GroupBy => write!(f, "groupby"),
            Operator::Aggregation { kind } => write!(f, "aggregation {}", kind.name()),
            Operator::Join => write!(f, "join"),
            Operator::Filter { lo, hi } => write!(f, "filter {} {}", lo, hi),
            Operator::Distinct => write!(f, "distinct"),
            Operator::TopK { k } => write!(f, "topk {}", k),
            Operator::Egress => write!(f, "egress"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op: Operator,
}

/// Operator DAG. Node indices are positions in `nodes`; `edges` are
/// `(from, to)` pairs.
#[derive(Debug, Clone, Default)]
pub struct PipelineDecl {
    pub nodes: Vec<Node>,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoIngress,
    NoEgress,
    MultipleEgress,
    Cycle,
    Unreachable(String),
    BadParam(String),
    DanglingEdge,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoIngress => write!(f, "pipeline has no ingress"),
            Violation::NoEgress => write!(f, "pipeline has no egress"),
            Violation::MultipleEgress => write!(f, "pipeline has more than one egress"),
            Violation::Cycle => write!(f, "pipeline graph contains a cycle"),
            Violation::Unreachable(n) => write!(f, "node `{}` unreachable from any ingress", n),
            Violation::BadParam(m) => write!(f, "parameter violation: {}", m),
            Violation::DanglingEdge => write!(f, "edge references a nonexistent node"),
        }
    }
}

impl PipelineDecl {
    /// Builds a linear chain of operators with auto-generated names.
    pub fn chain(ops: &[Operator]) -> Self {
        let mut decl = PipelineDecl::default();
        for (i, op) in ops.iter().enumerate() {
            decl.nodes.push(Node {
                name: format!("n{}", i),
                op: *op,
            });
            if i > 0 {
                decl.edges.push((i - 1, i));
            }
        }
        decl
    }

    pub fn add_node(&mut self, name: &str, op: Operator) -> usize {
        self.nodes.push(Node {
            name: name.to_string(),
            op,
        });
        self.nodes.len() - 1
    }

    pub fn add_edge(&mut self, from: usize, to: usize) {
        self.edges.push((from, to));
    }

    pub fn successors(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .filter(move |(f, _)| *f == n)
            .map(|(_, t)| *t)
    }

    pub fn ingress_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == Operator::Ingress)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks structural and parameter invariants; empty result means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self
            .edges
            .iter()
            .any(|&(a, b)| a >= self.nodes.len() || b >= self.nodes.len())
        {
            out.push(Violation::DanglingEdge);
            return out;
        }

        let ingresses = self.ingress_nodes();
        if ingresses.is_empty() {
            out.push(Violation::NoIngress);
        }
        let egresses = self
            .nodes
            .iter()
            .filter(|n| n.op == Operator::Egress)
            .count();
        if egresses == 0 {
            out.push(Violation::NoEgress);
        } else if egresses > 1 {
            out.push(Violation::MultipleEgress);
        }

        if self.has_cycle() {
            out.push(Violation::Cycle);
        } else {
            // Reachability only makes sense on an acyclic graph.
            let mut seen: HashSet<usize> = HashSet::new();
            let mut queue: VecDeque<usize> = ingresses.iter().copied().collect();
            while let Some(n) = queue.pop_front() {
                if seen.insert(n) {
                    queue.extend(self.successors(n));
                }
            }
            for (i, node) in self.nodes.iter().enumerate() {
                if node.op != Operator::Ingress && !seen.contains(&i) {
                    out.push(Violation::Unreachable(node.name.clone()));
                }
            }
        }

        for node in &self.nodes {
            match node.op {
                Operator::Window { width_us } if width_us <= 0 => {
                    out.push(Violation::BadParam(format!(
                        "window `{}` width must be positive",
                        node.name
                    )));
                }
                Operator::TopK { k } if k == 0 => {
                    out.push(Violation::BadParam(format!(
                        "topk `{}` requires k >= 1",
                        node.name
                    )));
                }
                Operator::Filter { lo, hi } if lo > hi => {
                    out.push(Violation::BadParam(format!(
                        "filter `{}` band is empty (lo > hi)",
                        node.name
                    )));
                }
                _ => {}
            }
        }
        out
    }

    fn has_cycle(&self) -> bool {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for &(_, t) in &self.edges {
            indeg[t] += 1;
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut visited = 0;
        while let Some(u) = queue.pop_front() {
            visited += 1;
            for v in self.successors(u) {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        visited != n
    }
}

fn parse_duration_us(s: &str) -> Result<i64, String> {
    let (num, mult) = if let Some(n) = s.strip_suffix("us") {
        (n, 1)
    } else if let Some(n) = s.strip_suffix("ms") {
        (n, 1_000)
    } else if let Some(n) = s.strip_suffix('s') {
        (n, 1_000_000)
    } else {
        (s, 1)
    };
    num.parse::<i64>()
        .map(|v| v * mult)
        .map_err(|_| format!("bad duration `{}`", s))
}

fn parse_operator(tokens: &[&str]) -> Result<Operator, String> {
    match tokens {
        ["ingress"] => Ok(Operator::Ingress),
        ["window", w] => Ok(Operator::Window {
            width_us: parse_duration_us(w)?,
        }),
        ["groupby"] => Ok(Operator::GroupBy),
        ["aggregation", kind] => AggKind::parse(kind)
            .map(|kind| Operator::Aggregation { kind })
            .ok_or_else(|| format!("unknown aggregation kind `{}`", kind)),
        ["join"] => Ok(Operator::Join),
        ["filter", lo, hi] => Ok(Operator::Filter {
            lo: lo.parse().map_err(|_| format!("bad filter lo `{}`", lo))?,
            hi: hi.parse().map_err(|_| format!("bad filter hi `{}`", hi))?,
        }),
        ["distinct"] => Ok(Operator::Distinct),
        ["topk", k] => Ok(Operator::TopK {
            k: k.parse().map_err(|_| format!("bad topk k `{}`", k))?,
        }),
        ["egress"] => Ok(Operator::Egress),
        _ => Err(format!("unrecognized operator `{}`", tokens.join(" "))),
    }
}

/// Parses the textual pipeline config. Two line forms:
///
/// - `node <name> <operator> [params...]` plus `edge <from> <to>` for DAGs;
/// - bare `<operator> [params...]` lines, auto-chained in file order.
///
/// `#` starts a comment. The two forms must not be mixed.
pub fn parse_pipeline(text: &str) -> Result<PipelineDecl, String> {
    let mut decl = PipelineDecl::default();
    let mut names: HashMap<String, usize> = HashMap::new();
    let mut bare_prev: Option<usize> = None;
    let mut saw_named = false;
    let mut saw_bare = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let err = |m: String| format!("line {}: {}", lineno + 1, m);
        match tokens[0] {
            "node" => {
                saw_named = true;
                if tokens.len() < 3 {
                    return Err(err("expected `node <name> <operator>`".into()));
                }
                let name = tokens[1];
                if names.contains_key(name) {
                    return Err(err(format!("duplicate node name `{}`", name)));
                }
                let op = parse_operator(&tokens[2..]).map_err(err)?;
                let idx = decl.add_node(name, op);
                names.insert(name.to_string(), idx);
            }
            "edge" => {
                saw_named = true;
                if tokens.len() != 3 {
                    return Err(err("expected `edge <from> <to>`".into()));
                }
                let from = *names
                    .get(tokens[1])
                    .ok_or_else(|| err(format!("unknown node `{}`", tokens[1])))?;
                let to = *names
                    .get(tokens[2])
                    .ok_or_else(|| err(format!("unknown node `{}`", tokens[2])))?;
                decl.add_edge(from, to);
            }
            _ => {
                saw_bare = true;
                let op = parse_operator(&tokens).map_err(err)?;
                let idx = decl.add_node(&format!("n{}", decl.nodes.len()), op);
                if let Some(prev) = bare_prev {
                    decl.add_edge(prev, idx);
                }
                bare_prev = Some(idx);
            }
        }
        if saw_named && saw_bare {
            return Err(err("cannot mix bare operator lines with node/edge lines".into()));
        }
    }
    Ok(decl)
}
