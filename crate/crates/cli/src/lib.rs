//! Benchmark definitions, deterministic trace generators, reference oracles,
//! and metrics emission for the streamgate engine.

pub mod bench;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod runner;

pub use bench::{BenchName, BenchSpec, GenSource};
