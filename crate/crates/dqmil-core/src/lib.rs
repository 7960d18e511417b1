//! Dual-query attention for multiple-instance learning, from scratch.
//!
//! A bag of instance embeddings is fused from one or more frozen feature
//! sources, aggregated by a dual-query cross-attention module (a latent
//! Perceiver-style pathway plus a single-query MIL-attention pathway),
//! and classified per bag. Training uses a self-distillation objective in
//! which the latent pathway supervises the MIL pathway.
//!
//! Everything is built on a small dense-tensor core with reverse-mode
//! automatic differentiation. The crate is `no_std` (alloc required);
//! all transcendental math goes through `libm` so results are
//! bit-identical across platforms. File formats, logging and the CLI
//! live in the companion `dqmil-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod data;
pub mod dme;
pub mod error;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{CoreError, Result};
pub use graph::{Graph, TensorId};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;
