//! Shared stream model: timestamped events, in-band watermarks, fixed
//! event-time windows, and pipeline declarations. Pure values and pure
//! functions, safe to use from any thread.

mod pipeline;
mod plan;

pub use pipeline::{parse_pipeline, AggKind, Node, Operator, PipelineDecl, Violation};
pub use plan::{ClosePrim, CloseStep, EagerOp, Plan, PlanError, PrimOp, StepInput};

use thiserror::Error;

/// A stream element. `event_time` is microseconds of event occurrence;
/// `extra` exists only for the 16-byte four-field layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub event_time: i64,
    pub key: i32,
    pub value: i32,
    pub extra: i32,
}

impl Event {
    pub fn new(event_time: i64, key: i32, value: i32) -> Self {
        Event {
            event_time,
            key,
            value,
            extra: 0,
        }
    }
}

/// Wire layout of an event record: 12 bytes (time, key, value) or 16 bytes
/// (time, key, value, extra).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum EventLayout {
    ThreeField,
    FourField,
}

impl EventLayout {
    pub fn item_size(self) -> usize {
        match self {
            EventLayout::ThreeField => 12,
            EventLayout::FourField => 16,
        }
    }

    pub fn encode(self, e: &Event, out: &mut Vec<u8>) {
        debug_assert!((0..=i64::from(u32::MAX)).contains(&e.event_time));
        out.extend_from_slice(&(e.event_time as u32).to_le_bytes());
        out.extend_from_slice(&e.key.to_le_bytes());
        out.extend_from_slice(&e.value.to_le_bytes());
        if self == EventLayout::FourField {
            out.extend_from_slice(&e.extra.to_le_bytes());
        }
    }

    pub fn decode(self, bytes: &[u8]) -> Event {
        let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let key = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let value = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let extra = if self == EventLayout::FourField {
            i32::from_le_bytes(bytes[12..16].try_into().unwrap())
        } else {
            0
        };
        Event {
            event_time: i64::from(t),
            key,
            value,
            extra,
        }
    }

    pub fn decode_all(self, bytes: &[u8]) -> Vec<Event> {
        let sz = self.item_size();
        debug_assert_eq!(bytes.len() % sz, 0);
        bytes.chunks_exact(sz).map(|c| self.decode(c)).collect()
    }

    pub fn encode_all(self, events: &[Event]) -> Vec<u8> {
        let mut out = Vec::with_capacity(events.len() * self.item_size());
        for e in events {
            self.encode(e, &mut out);
        }
        out
    }
}

/// In-band promise that no later event in the stream carries an event time
/// earlier than `value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Watermark {
    /// Event-time microseconds.
    pub value: i64,
    /// Processing-time microseconds at ingestion.
    pub ingress_proc_time: u64,
}

/// Fixed event-time window width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub width_us: i64,
}

impl WindowSpec {
    pub fn new(width_us: i64) -> Self {
        assert!(width_us > 0, "window width must be positive");
        WindowSpec { width_us }
    }

    /// End of window `w`, exclusive: windows are `[w*width, (w+1)*width)`.
    pub fn window_end(&self, w: u64) -> i64 {
        (w as i64 + 1) * self.width_us
    }
}

/// Index of a fixed window: `floor(event_time / width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WindowId(pub u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("event time {0} is negative")]
    NegativeEventTime(i64),
}

/// Assigns an event time to its fixed window.
pub fn assign_window(event_time: i64, spec: WindowSpec) -> Result<WindowId, ModelError> {
    if event_time < 0 {
        return Err(ModelError::NegativeEventTime(event_time));
    }
    Ok(WindowId((event_time / spec.width_us) as u64))
}

/// Microseconds between watermark ingress and result egress for one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OutputDelay(pub u64);

/// Record shape held by a data-plane array. Primitives check input schemas
/// and tag their outputs; layouts are little-endian and documented in
/// `docs/formats.md`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Schema {
    Events(EventLayout),
    /// key i32, value i64 — sums, counts, rank rows.
    KeyI64,
    /// key i32, sum i64, count i64.
    KeySumCnt,
    /// key i32, value f64 — per-key averages.
    KeyF64,
    /// key i32, extra i32, value f64 — per-key averages carrying the group
    /// field of four-field events.
    KeyF64Ex,
    /// key i32, value i32 — per-key medians.
    KeyI32,
    /// bare i32 values — distinct keys, global median.
    I32,
    /// bare i64 — global sum or count.
    I64,
    /// bare f64 — global average.
    F64,
    /// sum i64, count i64 — global sumcnt.
    I64I64,
    /// key i32, left value i32, right value i32.
    JoinRow,
    /// one i64 event-time value; the in-plane form of an ingested watermark,
    /// referenced by window-close executions as their trigger input.
    Watermark,
}

impl Schema {
    pub fn item_size(self) -> usize {
        match self {
            Schema::Events(l) => l.item_size(),
            Schema::KeyI64 => 12,
            Schema::KeySumCnt => 20,
            Schema::KeyF64 => 12,
            Schema::KeyF64Ex => 16,
            Schema::KeyI32 => 8,
            Schema::I32 => 4,
            Schema::I64 => 8,
            Schema::F64 => 8,
            Schema::I64I64 => 16,
            Schema::JoinRow => 12,
            Schema::Watermark => 8,
        }
    }
}
