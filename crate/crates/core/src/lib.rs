//! Kernel (linear) attention, its quadratic-form and dot-product references,
//! a toy multi-attention segmentation network, segmentation metrics, and the
//! tensor/autodiff machinery they run on.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
