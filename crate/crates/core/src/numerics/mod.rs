//! Tensor algebra with reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error, ParamMap};
pub use kernels::{layer_norm, matmul, softmax_rows, softmax_rows_masked, LAYER_NORM_EPS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
