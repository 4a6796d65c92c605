//! Structured top-k attention sparsification for transformer encoders.
//!
//! The crate is organised bottom-up:
//!
//! - [`attention`]: scaled dot-product attention with pre-softmax top-k
//!   masking, plus its exact backward pass.
//! - [`schedule`]: per-layer sparsity targets for the four named
//!   configurations (`baseline`, `uniform_sparse`, `light_sparse`,
//!   `aggressive_sparse`).
//! - [`model`]: a small pre-norm encoder classifier trained with AdamW.
//! - [`metrics`]: achieved sparsity, attention entropy, Pearson correlation
//!   and the analytic FLOPs model.
//! - [`data`]: tokenizer, vocabulary, TSV loading and a synthetic sentiment
//!   corpus.
//! - [`checkpoint`]: the binary parameter container.
//!
//! Batch-level work fans out over [`Exec`]. With the default `parallel`
//! feature the parallel path runs on rayon; without it every path is
//! sequential. Both produce bit-identical results.

pub mod attention;
pub mod checkpoint;
pub mod data;
mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod schedule;

pub use error::{Error, Result};
pub use exec::Exec;
