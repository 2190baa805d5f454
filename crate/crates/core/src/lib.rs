//! Hybrid mixture-of-experts building blocks for gaze-guided image classification.
//!
//! The crate is `no_std` (with `alloc`) and contains only pure computation:
//!
//! - [`tensor`] / [`tape`]: dense row-major tensors and a tape-based reverse-mode
//!   autodiff engine with the handful of ops the model needs.
//! - [`nn`]: linear, convolution, residual basic block and MLP layers.
//! - [`moe`]: top-k routing, expert branches, the fusion gate and the assembled
//!   [`moe::DkghBlock`], plus the routing statistics used by the balancing loss.
//! - [`model`]: gaze encoder and the residual classifier that hosts hybrid blocks.
//! - [`loss`] / [`metrics`]: training objective and evaluation metrics.
//! - [`optim`]: Adam and step learning-rate decay.
//! - [`gradcheck`]: central finite-difference verification of gradients.
//!
//! File formats, data loading and the training loop live in the `dkgh` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod gradcheck;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{DkghError, Result};
pub use real::{DType, Real};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
