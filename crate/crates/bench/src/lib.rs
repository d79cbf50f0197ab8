//! Benchmark harness: strict echo backends, a closed-loop load
//! generator, and scenario orchestration for comparing relay
//! deployment shapes.

pub mod backend;
pub mod loadgen;
pub mod report;
pub mod scenario;
