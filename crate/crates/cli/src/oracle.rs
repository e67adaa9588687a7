//! Reference results computed directly from the generated event streams,
//! bypassing the engine and its primitives. Each oracle recomputes a
//! window's expected egress payload with plain single-threaded code so
//! engine runs can be compared byte for byte.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use streamgate_core::model::{Event, EventLayout};

use crate::bench::{BenchName, BenchSpec};

/// Expected egress payload per window.
pub fn expected_payloads(spec: &BenchSpec) -> BTreeMap<u64, Vec<u8>> {
    (0..spec.windows)
        .map(|w| (w, window_payload(spec, w)))
        .collect()
}

fn sorted_events(spec: &BenchSpec, source: u8, window: u64) -> Vec<Event> {
    let mut events = spec.window_events(source, window);
    // Stable sort preserves ingestion order on (key, time) ties, matching
    // the data plane's fixed tie-break.
    events.sort_by(|a, b| (a.key, a.event_time).cmp(&(b.key, b.event_time)));
    events
}

pub fn window_payload(spec: &BenchSpec, window: u64) -> Vec<u8> {
    match spec.name {
        BenchName::WinSum => {
            let sum: i64 = spec
                .window_events(0, window)
                .iter()
                .map(|e| i64::from(e.value))
                .sum();
            sum.to_le_bytes().to_vec()
        }
        BenchName::Filter => {
            let passing: Vec<Event> = spec
                .window_events(0, window)
                .into_iter()
                .filter(|e| (spec.band.0..=spec.band.1).contains(&e.value))
                .collect();
            EventLayout::ThreeField.encode_all(&passing)
        }
        BenchName::Distinct => {
            let keys: BTreeSet<i32> = spec
                .window_events(0, window)
                .iter()
                .map(|e| e.key)
                .collect();
            let mut out = Vec::with_capacity(keys.len() * 4);
            for k in keys {
                out.extend_from_slice(&k.to_le_bytes());
            }
            out
        }
        BenchName::TopK => {
            let events = sorted_events(spec, 0, window);
            let mut out = Vec::new();
            let mut i = 0;
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
                for &p in idx.iter().take(spec.k as usize) {
                    out.push(events[p]);
                }
                i = j;
            }
            EventLayout::ThreeField.encode_all(&out)
        }
        BenchName::Join => {
            let left = sorted_events(spec, 0, window);
            let right = sorted_events(spec, 1, window);
            let mut by_key: HashMap<i32, Vec<usize>> = HashMap::new();
            for (i, e) in right.iter().enumerate() {
                by_key.entry(e.key).or_default().push(i);
            }
            let mut out = Vec::new();
            for l in &left {
                if let Some(rs) = by_key.get(&l.key) {
                    for &r in rs {
                        out.extend_from_slice(&l.key.to_le_bytes());
                        out.extend_from_slice(&l.value.to_le_bytes());
                        out.extend_from_slice(&right[r].value.to_le_bytes());
                    }
                }
            }
            out
        }
        BenchName::Power => {
            let events = spec.window_events(0, window);
            // Per-plug load averages, accumulated exactly in integers.
            let mut plugs: BTreeMap<i32, (i32, i64, i64)> = BTreeMap::new();
            for e in &events {
                let p = plugs.entry(e.key).or_insert((e.extra, 0, 0));
                p.1 += i64::from(e.value);
                p.2 += 1;
            }
            let avgs: Vec<(i32, f64)> = plugs
                .iter()
                .map(|(_, &(house, sum, cnt))| (house, sum as f64 / cnt as f64))
                .collect();
            let mean = avgs.iter().map(|&(_, a)| a).sum::<f64>() / avgs.len() as f64;
            let mut houses: BTreeMap<i32, i64> = BTreeMap::new();
            for &(house, avg) in &avgs {
                let c = houses.entry(house).or_insert(0);
                if avg > mean {
                    *c += 1;
                }
            }
            let mut ranked: Vec<(i32, i64)> = houses.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut out = Vec::with_capacity(ranked.len() * 12);
            for (house, count) in ranked {
                out.extend_from_slice(&house.to_le_bytes());
                out.extend_from_slice(&count.to_le_bytes());
            }
            out
        }
    }
}
