//! Core engine for structured filter pruning of fire-module CNNs.
//!
//! Everything numeric lives here: a dense tensor type with reverse-mode
//! automatic differentiation, the model graph family (squeeze/expand fire
//! stacks with batch normalization), SGDM training with a plateau learning
//! rate schedule, Taylor-score filter pruning with dependency-aware surgery,
//! and the biometric verification protocol (templates, cosine scores, EER).
//!
//! The crate is `no_std` + `alloc`; file IO, the CLI, and report rendering
//! live in the companion `prunefire-cli` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod float;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pruning;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use float::Float;
pub use model::ModelGraph;
pub use rng::Rng;
pub use tape::{Gradients, Tape, ValId};
pub use tensor::Tensor;
