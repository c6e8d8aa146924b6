//! Desk-scale cascaded transformer inference with attention-guided visual
//! token pruning and small-model early exiting.
//!
//! The pipeline runs a small decoder-only model first, accumulates a global
//! visual-token importance map from its attention across all layers and
//! heads, and either exits early on a confidence/consistency decision score
//! or invokes a large model whose visual tokens are pruned mid-stack by the
//! small model's ranking. Costs are accounted analytically in FLOPs.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`engine`]: the toy decoder-only transformer (prefill, KV-cached decode,
//!   mid-stack token removal, teacher-forced scoring, serialization)
//! - [`aggregate`]: streaming accumulation of the importance map
//! - [`pruner`]: rankings, retention schedules, kept-index sets
//! - [`gate`]: early-exit decision scores and threshold calibration
//! - [`cascade`]: orchestration of small-then-large runs plus the FLOPs model
//! - [`synth`]: planted toy model pairs and needle datasets for ground-truth
//!   verification without training
//!
//! All numeric kernels are generic over the scalar type via [`Scalar`];
//! the concrete aliases below pin the default 64-bit pipeline.

pub mod aggregate;
pub mod cascade;
pub mod engine;
pub mod gate;
pub mod pruner;
pub mod scalar;
pub mod synth;

pub use scalar::Scalar;

/// Default-precision model (all shipped pipelines run in f64).
pub type Model64 = engine::Model<f64>;
/// Single-precision model, mainly exercised by tests proving the kernels
/// are scalar-agnostic.
pub type Model32 = engine::Model<f32>;
/// Default-precision attention trace.
pub type AttentionTrace64 = aggregate::AttentionTrace<f64>;
