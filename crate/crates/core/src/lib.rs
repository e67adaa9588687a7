//! Core of a partitioned stream-analytics engine: an untrusted control plane
//! drives a gated data plane of array-based stream primitives, every gate
//! crossing leaves an audit record, and a cloud-side verifier replays those
//! records to attest correctness and result freshness.
//!
//! Module map:
//! - [`model`]: events, watermarks, fixed windows, pipeline declarations and
//!   the operator-to-primitive execution plan shared by engine and verifier.
//! - [`mem`]: the data plane's allocator — append-only uArrays placed into
//!   uGroups, hint-guided placement, chunked in-place growth, front-only
//!   reclamation.
//! - [`dataplane`]: opaque-reference table, the four-entry gate, and the
//!   trusted primitive kernels.
//! - [`audit`]: audit records, the columnar block codec, and the block log.
//! - [`io`]: length-prefixed frames, AES-128-GCM at ingress/egress, the
//!   trusted-IO vs via-OS ingest paths.
//! - [`engine`]: worker pool, watermark-driven window scheduling, consumption
//!   hints, backpressure.
//! - [`verify`]: symbolic replay of audit streams for correctness, freshness
//!   attribution via derived-from chains.

pub mod audit;
pub mod dataplane;
pub mod engine;
pub mod io;
pub mod mem;
pub mod model;
pub mod util;
pub mod verify;

pub use dataplane::{ConsumptionHint, Gate, GateConfig, GateError, GateRequest, GateResponse, HintRef, OpaqueRef, PrimParams, PrimitiveId};
pub use engine::{EngineConfig, FrameSource, RunReport, Variant};
pub use mem::{AllocConfig, Allocator, ArrayKind, MemoryStats};
pub use model::{
    assign_window, AggKind, Event, EventLayout, PipelineDecl, Plan, Watermark, WindowId,
    WindowSpec,
};
pub use verify::{VerdictReport, Verifier};
