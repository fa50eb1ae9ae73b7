pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod parallel;
pub mod signal_io;
pub mod training;

pub use autodiff::{no_grad, Scalar, Tensor};
pub use error::{Error, Result};
