//! Dual-stream emotion/cognition bridge for multi-modal captioning.
//!
//! The crate is `no_std` (with `alloc`) and holds all numerical code:
//! a small reverse-mode autodiff engine, per-modality Q-formers, the
//! two-stream bridge, the stage-1 contrastive objectives, a frozen toy
//! caption decoder, AdamW with the two-stage training loops, a seeded
//! synthetic dataset generator and caption/embedding metrics. File
//! formats and the command line live in the `ecmc` crate.

#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bridgenet;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod qformer;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
