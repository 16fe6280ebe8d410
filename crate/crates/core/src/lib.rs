//! A deterministic laboratory for key-value cache corruption attacks on
//! decoder-only transformer inference.
//!
//! The crate bundles a toy transformer whose attention reads exclusively
//! through an instrumented [`cache::KVCache`], the attack families and
//! scheduling machinery in [`attack`], verifiers for the attention-score,
//! softmax, multi-head and layer-norm perturbation bounds in [`theory`],
//! three lightweight mitigations in [`defense`], and paired clean/attacked
//! measurements in [`metrics`].

mod bytes;
pub mod error;

pub mod attack;
pub mod cache;
pub mod defense;
pub mod exec;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod theory;

pub use error::{Error, Result};
