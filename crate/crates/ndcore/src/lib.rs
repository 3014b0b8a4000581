//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! Broadcasting is limited to scalar-vs-tensor and equal shapes; the row
//! operations ([`Var::add_row`], [`Var::mul_row`]) cover bias and affine
//! layers explicitly.

mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{concat_cols, concat_rows, gelu, sigmoid, Elementwise, Tape, Var, GELU_COEFF, LEAKY_RELU_SLOPE};
pub use tensor::Tensor;
