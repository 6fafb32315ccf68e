//! Pixel-wise gradient-norm uncertainty for convolutional segmentation heads.
//!
//! The library computes per-pixel uncertainty heatmaps from the closed-form
//! loss gradients of a segmentation head's final (and second-to-last)
//! convolution, without autodiff: the per-pixel gradient is a rank-1 outer
//! product, so its p-norm is the product of two channel-vector norms. On top
//! of the heatmaps sit segment-level features with linear meta models, and
//! pixel-level calibration / out-of-distribution evaluation metrics. A
//! brute-force finite-difference oracle verifies the closed forms.

pub mod cli;
pub mod error;
pub mod gradnorm;
pub mod metamodel;
pub mod metrics;
pub mod npy;
pub mod oracle;
pub mod rng;
pub mod segments;
pub mod tensor;
pub mod toynet;

pub use error::{Error, Result};
pub use tensor::{Dtype, Tensor};
