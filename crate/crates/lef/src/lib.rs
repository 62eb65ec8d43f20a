//! Runtime around `lef-core`: configuration files, data set and checkpoint
//! formats, threaded execution, ablation tables, latency benchmarks and
//! BEV rendering.

pub mod ablation;
pub mod bench;
pub mod config;
pub mod exec;
pub mod formats;
pub mod pipeline;
pub mod viz;

pub use config::Config;
pub use exec::Runtime;
