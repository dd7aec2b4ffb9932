//! Long-context extension for small decoder-only language models.
//!
//! A frozen downstream transformer reads a mix of ordinary token embeddings
//! and compressed soft-input rows ("extensible embeddings") produced by a
//! shallow trainable embedder from earlier context chunks. One soft row
//! stands in for `k` tokens, so the fixed context window covers roughly
//! `k` times more text. The crate bundles the tensor engine, the model,
//! the compression pipeline, the two-pass training objective, streaming and
//! precomputed inference, and an evaluation/benchmark harness, all desk
//! scale and CPU only.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod extension;
pub mod inference;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Param, ParamSet, Scalar, Tensor, Var};
