//! Dense tensors and tape-based reverse-mode differentiation.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_extrapolated};
pub use tape::{dropout_mask, Gradients, MacCount, Tape, Var, LAYERNORM_EPS, RMSNORM_EPS};
pub use tensor::Tensor;
