//! Reverse-mode differentiation over the handful of tensor operations the
//! networks need, plus the Adam optimizer and finite-difference checking.

mod adam;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{clip_grad_norm, Adam};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{gaussian_log_density, Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
