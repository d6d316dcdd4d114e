//! Device/cloud collaborative reasoning.
//!
//! A query is decomposed into sub-tasks, the sub-tasks are arranged into a
//! dependency graph and executed batch by batch, and each sub-task is routed
//! to either a small on-device model or a large cloud model. Routing comes
//! from token-probability confidence, a searched allocation, or a trained
//! adapter over sentence embeddings.

pub mod adapter;
pub mod alphatree;
pub mod backend;
pub mod bench;
pub mod decompose;
pub mod error;
pub mod execute;
pub mod schedule;
pub mod synthetic;
pub mod types;
pub mod uncertainty;

pub use error::{Error, Result};
pub use types::{AllocationScheme, Checker, CostLedger, Metrics, ModelTier, SubTask, Task};

pub use adapter::AdapterWeights;
/// Confidence settings in double precision.
pub type AlphaConfig = uncertainty::AlphaConfig<f64>;
