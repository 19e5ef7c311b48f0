//! Differentiable volume rendering with spiking density activations.
//!
//! This crate is `no_std` (it needs `alloc`). Everything that touches files,
//! threads or the command line lives in the `snerf` companion crate.
//!
//! The pieces, bottom-up:
//!
//! - [`tensor`] and [`diff`]: a small reverse-mode autodiff tape over dense
//!   rank-2 tensors, with custom backward rules.
//! - [`neuron`]: IF, FIF, bounded FIF (tanh-bounded, learnable `k`/`r`) and
//!   hard-bounded FIF activations plus their surrogate gradients.
//! - [`field`]: a positional-encoded MLP whose density output goes through a
//!   spiking neuron.
//! - [`render`]: ray sampling, compositing, depth extraction and the
//!   depth-error envelope in terms of threshold, peak density and sampling.
//! - [`scene`]: analytic scenes used as ground truth.
//! - [`loss`], [`adam`], [`trainer`]: the training objective and one step of
//!   optimization.
//! - [`metrics`] and [`bound_check`]: evaluation and the randomized
//!   verification of the depth-error envelope.
//! - [`verify`]: gradient oracles over random graphs and the full loss.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod adam;
pub mod bound_check;
pub mod diff;
pub mod encoding;
mod error;
pub mod field;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod neuron;
pub mod render;
pub mod scene;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

/// Three-component vector used for positions, directions and colors.
pub type Vec3 = [f64; 3];
