//! Benchmark harness for the vcirt runtime: message-rate microbenchmarks,
//! progress-engine demos and small application patterns, all emitting CSV.

pub mod bspmm;
pub mod busy;
pub mod common;
pub mod conformance;
pub mod deadlock;
pub mod ebms;
pub mod fuzz;
pub mod msgrate;
pub mod senders;
pub mod stencil;

pub use common::{median, spearman, BenchError, BenchResult, Harness, Mode, Row, Table};
