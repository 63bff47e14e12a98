//! Benchmark harness: file formats, configuration, task streams, the
//! incremental protocol, metrics and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod format;
pub mod metrics;
pub mod protocol;
pub mod stream;

pub use config::{Method, RunConfig};
pub use metrics::{MemoryReport, RunMetrics};
pub use protocol::{run_from, run_protocol, Pipeline, TaskReport, UpdateKind};
pub use stream::{synth_stream, SynthConfig, SyntheticBenchmark, Task, TaskStream};
