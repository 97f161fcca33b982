//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_against, GradCheckReport, DEFAULT_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
