//! Data-pipeline runtime with per-operator tracing, an operational-analysis
//! rate model and an optimizer that allocates cores, places a cache and sizes
//! prefetch buffers.

pub mod bench;
pub mod cli;
pub mod engine;
pub mod error;
pub mod optimizer;
pub mod rates;
pub mod rewriter;
pub mod storage;
pub mod tracer;

pub use error::{Error, Result};
