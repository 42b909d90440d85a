//! A compact reverse-mode automatic differentiation engine over dense `f64`
//! tensors, with exactly the layers a ViT encoder, a two-way transformer
//! mask decoder and convolutional refinement heads need.
//!
//! Everything runs in double precision on the CPU and is deterministic:
//! the same inputs always produce bit-identical values and gradients.

pub mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::conv::Conv2dSpec;
pub use ops::elementwise::{gelu_scalar, normal_cdf, sigmoid_scalar};
pub use ops::linalg::matmul_raw;
pub use ops::norm::{BatchNormMode, BatchStats};
pub use ops::pool::{adaptive_bin, avg_pool3_same, bilinear_taps, resize_bilinear, resize_nearest};
pub use tensor::Tensor;
