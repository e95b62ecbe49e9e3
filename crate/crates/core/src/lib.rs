//! moelab: planning, estimation and numerics for large-scale MoE training.
//!
//! The library is organised by concern:
//! - [`model`]: model, cluster, parallel and job descriptions plus validation.
//! - [`folding`]: process-group derivation for folded attention/MoE parallelism.
//! - [`memory`]: per-GPU memory census and optimization levers.
//! - [`perf`]: communication volumes, latency model, overlap and the advisor.
//! - [`pipeline`]: layout DSL and the pipeline schedule simulator.
//! - [`moe`]: reference routing, permutation, combine and upcycling numerics.
//! - [`quant`]: low-precision format emulation and scaling recipes.
//! - [`planners`]: Dynamic-CP packing, ECHO cloning and the paged stash.
//! - [`api`]: the versioned JSON operations shared by the CLI and HTTP service.

pub mod api;
pub mod error;
pub mod folding;
pub mod memory;
pub mod model;
pub mod moe;
pub mod perf;
pub mod pipeline;
pub mod planners;
pub mod quant;
pub mod server;

pub use error::{Error, Result};
