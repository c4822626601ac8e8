//! Differentiable CNN engine and training harness for the PLU-Net
//! segmentation family (U-Net, LU-Net, PU-Net, PLU-Net).
//!
//! The crate is self-contained: dense NCHW tensors, reverse-mode autodiff
//! over a recorded tape, the LG/LS/PS building blocks, encoder-decoder
//! model assembly, parameter/FLOP accounting, segmentation metrics, a
//! synthetic ellipse dataset and an Adam training loop. Everything is
//! deterministic given a seed; see [`runtime`] for the threading switch.

pub mod analysis;
pub mod arch;
pub mod blocks;
pub mod codec;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod runtime;
pub mod tape;
pub mod tensor;
pub mod train;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::{Dims, Scalar, Tensor};
