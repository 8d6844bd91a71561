//! Benchmark and tooling layer: memory accounting, metrics, toy tasks,
//! attention traces, reports, and the policy-comparison sweep.

pub mod compare;
pub mod memory;
pub mod report;
pub mod stats;
pub mod tasks;
pub mod trace;

pub use compare::{run_compare, CompareConfig, PolicyName};
pub use memory::kv_memory_bytes;
pub use report::RunReport;
pub use stats::{agreement_rate, spearman};
pub use tasks::needle_task;
pub use trace::{load_trace, save_trace, AttentionTrace, TraceManifest};
