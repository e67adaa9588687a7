//! The six benchmarks and their deterministic event generators. Synthetic
//! fields are 32-bit integers from a seeded stream cipher, so every variant
//! and worker count sees byte-identical input for a given seed.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use streamgate_core::engine::FrameSource;
use streamgate_core::io::Frame;
use streamgate_core::model::{
    AggKind, EventLayout, Operator, PipelineDecl, Plan, PlanError,
};

/// Key universe for grouped synthetic benchmarks.
pub const GROUP_KEYS: i32 = 4096;
/// Distinct draws its keys from an 11K-id universe.
pub const DISTINCT_KEYS: i32 = 11_000;
/// Power-grid shape: houses and plugs per house.
pub const HOUSES: i32 = 40;
pub const PLUGS_PER_HOUSE: i32 = 20;
/// Band covering exactly 1% of the 32-bit value domain.
pub const ONE_PERCENT_BAND: (i32, i32) = (-21_474_836, 21_474_836);

pub const SECOND_US: i64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum BenchName {
    TopK,
    Distinct,
    Join,
    WinSum,
    Filter,
    Power,
}

pub const ALL_BENCHES: [BenchName; 6] = [
    BenchName::TopK,
    BenchName::Distinct,
    BenchName::Join,
    BenchName::WinSum,
    BenchName::Filter,
    BenchName::Power,
];

impl BenchName {
    pub fn parse(s: &str) -> Option<BenchName> {
        Some(match s.to_ascii_lowercase().as_str() {
            "topk" => BenchName::TopK,
            "distinct" => BenchName::Distinct,
            "join" => BenchName::Join,
            "winsum" => BenchName::WinSum,
            "filter" => BenchName::Filter,
            "power" => BenchName::Power,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchName::TopK => "topk",
            BenchName::Distinct => "distinct",
            BenchName::Join => "join",
            BenchName::WinSum => "winsum",
            BenchName::Filter => "filter",
            BenchName::Power => "power",
        }
    }

    pub fn layout(self) -> EventLayout {
        if self == BenchName::Power {
            EventLayout::FourField
        } else {
            EventLayout::ThreeField
        }
    }

    pub fn sources(self) -> usize {
        if self == BenchName::Join {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub name: BenchName,
    pub windows: u64,
    pub events_per_window: u64,
    pub width_us: i64,
    pub seed: u64,
    pub k: u32,
    pub band: (i32, i32),
    /// Watermark cadence in windows; above 1, batches span windows and one
    /// watermark closes several.
    pub wm_every: u64,
    /// Optional key trace (e.g. taxi ids); entries are cycled.
    pub key_trace: Option<Vec<i32>>,
    /// Optional value trace (e.g. sensor readings); entries are cycled.
    pub value_trace: Option<Vec<i32>>,
}

impl BenchSpec {
    pub fn new(name: BenchName) -> BenchSpec {
        BenchSpec {
            name,
            windows: 10,
            events_per_window: 100_000,
            width_us: SECOND_US,
            seed: 1,
            k: 10,
            band: ONE_PERCENT_BAND,
            wm_every: 1,
            key_trace: None,
            value_trace: None,
        }
    }

    pub fn total_events(&self) -> u64 {
        self.windows * self.events_per_window * self.name.sources() as u64
    }

    pub fn decl(&self) -> PipelineDecl {
        let w = Operator::Window {
            width_us: self.width_us,
        };
        match self.name {
            BenchName::TopK => PipelineDecl::chain(&[
                Operator::Ingress,
                w,
                Operator::GroupBy,
                Operator::TopK { k: self.k },
                Operator::Egress,
            ]),
            BenchName::Distinct => PipelineDecl::chain(&[
                Operator::Ingress,
                w,
                Operator::GroupBy,
                Operator::Distinct,
                Operator::Egress,
            ]),
            BenchName::WinSum => PipelineDecl::chain(&[
                Operator::Ingress,
                w,
                Operator::Aggregation { kind: AggKind::Sum },
                Operator::Egress,
            ]),
            BenchName::Filter => PipelineDecl::chain(&[
                Operator::Ingress,
                w,
                Operator::Filter {
                    lo: self.band.0,
                    hi: self.band.1,
                },
                Operator::Egress,
            ]),
            BenchName::Power => PipelineDecl::chain(&[
                Operator::Ingress,
                w,
                Operator::GroupBy,
                Operator::Aggregation { kind: AggKind::Avg },
                Operator::Aggregation {
                    kind: AggKind::AboveAvgCount,
                },
                Operator::Egress,
            ]),
            BenchName::Join => {
                let mut decl = PipelineDecl::default();
                let l = decl.add_node("left", Operator::Ingress);
                let r = decl.add_node("right", Operator::Ingress);
                let wl = decl.add_node("wl", w);
                let wr = decl.add_node("wr", w);
                let j = decl.add_node("join", Operator::Join);
                let e = decl.add_node("out", Operator::Egress);
                decl.add_edge(l, wl);
                decl.add_edge(r, wr);
                decl.add_edge(wl, j);
                decl.add_edge(wr, j);
                decl.add_edge(j, e);
                decl
            }
        }
    }

    pub fn plan(&self) -> Result<Plan, PlanError> {
        Plan::compile(&self.decl(), self.name.layout())
    }

    /// All events of one window for one source, in generation order.
    pub fn window_events(&self, source: u8, window: u64) -> Vec<streamgate_core::model::Event> {
        // Independent stream per (seed, source, window) so window groups can
        // be produced lazily in any order.
        let mut rng = ChaCha12Rng::seed_from_u64(
            self.seed ^ (u64::from(source) << 56) ^ window.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let base = window as i64 * self.width_us;
        let n = self.events_per_window;
        let mut out = Vec::with_capacity(n as usize);
        for i in 0..n {
            let t = base + rng.random_range(0..self.width_us);
            let (key, value, extra) = match self.name {
                BenchName::TopK | BenchName::Join => {
                    (rng.random_range(0..GROUP_KEYS), rng.random::<i32>(), 0)
                }
                BenchName::Distinct => {
                    let key = match &self.key_trace {
                        Some(trace) => trace[((window * n + i) as usize) % trace.len()],
                        None => rng.random_range(0..DISTINCT_KEYS),
                    };
                    (key, rng.random::<i32>(), 0)
                }
                BenchName::WinSum => {
                    let value = match &self.value_trace {
                        Some(trace) => trace[((window * n + i) as usize) % trace.len()],
                        None => rng.random::<i32>(),
                    };
                    (rng.random::<i32>(), value, 0)
                }
                BenchName::Filter => (rng.random::<i32>(), rng.random::<i32>(), 0),
                BenchName::Power => {
                    let house = rng.random_range(0..HOUSES);
                    let plug = rng.random_range(0..PLUGS_PER_HOUSE);
                    let load = rng.random_range(0..10_000);
                    (house * 100 + plug, load, house)
                }
            };
            out.push(streamgate_core::model::Event {
                event_time: t,
                key,
                value,
                extra,
            });
        }
        out
    }
}

/// Deterministic frame source: per watermark group, one events frame per
/// source spanning `wm_every` windows, followed by that group's watermarks.
pub struct GenSource {
    spec: BenchSpec,
    encrypt: bool,
    nonce: u64,
    queue: VecDeque<(u8, Frame)>,
    next_window: u64,
    finished: bool,
}

impl GenSource {
    pub fn new(spec: BenchSpec, encrypt: bool) -> GenSource {
        GenSource {
            spec,
            encrypt,
            nonce: 1,
            queue: VecDeque::new(),
            next_window: 0,
            finished: false,
        }
    }

    fn push(&mut self, sid: u8, frame: Frame) {
        let frame = if self.encrypt {
            self.nonce += 1;
            frame.into_encrypted(self.nonce)
        } else {
            frame
        };
        self.queue.push_back((sid, frame));
    }

    fn produce_group(&mut self) {
        let spec = self.spec.clone();
        if self.next_window >= spec.windows {
            if !self.finished {
                for sid in 0..spec.name.sources() as u8 {
                    self.push(sid, Frame::end());
                }
                self.finished = true;
            }
            return;
        }
        let layout = spec.name.layout();
        let group_end = (self.next_window + spec.wm_every).min(spec.windows);
        for sid in 0..spec.name.sources() as u8 {
            let mut events = Vec::new();
            for w in self.next_window..group_end {
                events.extend(spec.window_events(sid, w));
            }
            self.push(sid, Frame::events(layout.encode_all(&events)));
        }
        let wm_value = group_end as i64 * spec.width_us;
        for sid in 0..spec.name.sources() as u8 {
            self.push(sid, Frame::watermark(wm_value));
        }
        self.next_window = group_end;
    }
}

impl FrameSource for GenSource {
    fn next_frame(&mut self) -> Option<(u8, Frame)> {
        while self.queue.is_empty() {
            if self.finished {
                return None;
            }
            self.produce_group();
        }
        self.queue.pop_front()
    }
}

/// Loads a one-integer-per-line trace file.
pub fn load_trace(path: &std::path::Path) -> std::io::Result<Vec<i32>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(line.parse::<i32>().map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("line {}: {}", i + 1, e),
            )
        })?);
    }
    if out.is_empty() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "trace file has no entries",
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        let spec = {
            let mut s = BenchSpec::new(BenchName::WinSum);
            s.windows = 2;
            s.events_per_window = 500;
            s.seed = 42;
            s
        };
        let mut a = GenSource::new(spec.clone(), false);
        let mut b = GenSource::new(spec, false);
        loop {
            let fa = a.next_frame();
            let fb = b.next_frame();
            assert_eq!(fa, fb);
            if fa.is_none() {
                break;
            }
        }
    }

    #[test]
    fn distinct_keys_bounded() {
        let mut spec = BenchSpec::new(BenchName::Distinct);
        spec.events_per_window = 100_000;
        let events = spec.window_events(0, 0);
        let distinct: std::collections::HashSet<i32> =
            events.iter().map(|e| e.key).collect();
        assert!(distinct.len() <= 11_000);
        assert!(events.iter().all(|e| (0..DISTINCT_KEYS).contains(&e.key)));
    }

    #[test]
    fn uniform_values_pass_chi_square() {
        // 256-bin chi-square on the top byte of Filter values; critical
        // value for df=255 at alpha=0.001 is 330.52.
        let mut spec = BenchSpec::new(BenchName::Filter);
        spec.events_per_window = 200_000;
        let events = spec.window_events(0, 0);
        let mut bins = [0u64; 256];
        for e in &events {
            bins[((e.value as u32) >> 24) as usize] += 1;
        }
        let expect = events.len() as f64 / 256.0;
        let chi2: f64 = bins
            .iter()
            .map(|&o| {
                let d = o as f64 - expect;
                d * d / expect
            })
            .sum();
        assert!(chi2 < 330.52, "chi-square {} too high", chi2);
    }

    #[test]
    fn all_decls_validate_and_compile() {
        for name in ALL_BENCHES {
            let spec = BenchSpec::new(name);
            assert_eq!(spec.decl().validate(), vec![]);
            spec.plan().unwrap();
        }
    }
}
