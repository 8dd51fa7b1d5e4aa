//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_strided, GradCheckReport};
pub use tape::{CellRect, Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;
