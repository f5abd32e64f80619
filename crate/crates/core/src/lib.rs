//! Core of a pairwise mixup attentive adversarial detector for unsupervised
//! domain-adaptive object detection.
//!
//! The crate is `no_std` (with `alloc`): a small reverse-mode autodiff tensor
//! library, a deterministic synthetic two-domain detection benchmark, a
//! miniature two-stage detector, intermediate-domain feature mixing, pairwise
//! attention, the adaptive pyramid domain discriminator, and the training loop.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod apc;
pub mod config;
pub mod detector;
pub mod dommix;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod pam;
pub mod params;
pub mod projection;
pub mod tape;
pub mod synth;
pub mod tensor;
pub mod train;

pub use kernels::{nearest_src, pool_bin};
pub use tape::{Gradients, Tape, Var, Window};
pub use tensor::{Tensor, TensorError};
