//! Minimal reverse-mode automatic differentiation over dense tensors.

pub mod kernels;
pub mod nn;
mod ops;
mod scalar;
pub mod serialize;
mod tensor;

pub use nn::Padding;
pub use scalar::Scalar;
pub use tensor::{is_recording, no_grad, BackwardArgs, BackwardFn, Tensor};
