//! Desk-scale sparse-attention decode engine.
//!
//! A CPU reference for irregular per-query, per-head token-level sparse
//! decoding over a paged KV cache, instrumented so that byte traffic is
//! accounted exactly rather than estimated. The crate provides:
//!
//! - [`kv_store`]: the paged cache with an atomic gather-byte counter,
//! - [`attention`]: numerically stable dense and sparse decode with GQA
//!   head grouping, sharing one gather/softmax/accumulate path,
//! - [`selectors`]: oracle top-k, sink+local+heavy retention, channel-sketch
//!   and stochastic index selection,
//! - [`traffic`]: the analytic byte-traffic model with calibrated speedup
//!   prediction and break-even search,
//! - [`collapse`]: constructive witnesses that dense attention outputs
//!   collapse distinct distributions once the hidden width is below `N - 1`.
//!
//! Storage is generic over the scalar type ([`Scalar`]): half precision
//! (`f16`, element width 2) or single precision (`f32`, element width 4).
//! Score and output arithmetic always runs at single precision or wider.

pub mod attention;
pub mod collapse;
pub mod kv_store;
pub mod scalar;
pub mod selectors;
pub mod traffic;

pub use attention::{
    dense_decode, gqa_kv_head, sparse_decode, AttentionConfig, AttentionOutput, AttnError,
    HeadIndices, QueryBlock, SparseIndexSet,
};
pub use kv_store::{CacheConfig, KvError, PagedKvCache, SeqId};
pub use scalar::Scalar;
pub use selectors::{Budget, HeavyBudget, SelectError, SelectorSpec};
pub use traffic::{Calibration, CalibrationTable, TrafficError, WorkloadGeometry};

/// Half-precision storage (element width 2).
pub type HalfCache = PagedKvCache<half::f16>;
/// Single-precision storage (element width 4).
pub type SingleCache = PagedKvCache<f32>;

/// Half-precision query block.
pub type HalfQueryBlock = QueryBlock<half::f16>;
/// Single-precision query block.
pub type SingleQueryBlock = QueryBlock<f32>;
