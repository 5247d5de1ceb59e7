//! Two-stream video object segmentation at desk scale.
//!
//! A pixel stream retrieves per-pixel features from a memory of reference
//! frames, an instance stream segments with dynamically generated heads, and
//! a routing map blends the two before an FPN-style decoder produces mask
//! logits. Everything here is pure computation over [`Tensor`] values; file
//! formats, the CLI and the training loop live in the `tsn` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod config;
pub mod division_fusion;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod instance_stream;
pub mod losses;
pub mod memory_bank;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pixel_stream;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autodiff::{Grads, Graph, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
