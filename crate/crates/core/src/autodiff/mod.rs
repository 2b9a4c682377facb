//! Reverse-mode automatic differentiation over small dense tensors.

mod gradcheck;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradients, compare_with_numeric, finite_difference_check, GradCheckReport};
pub use optim::{clip_grad_norm, SgdMomentum};
pub use scalar::Scalar;
pub use tape::{Gradients, OpKind, Tape, Var, LN_EPS, NORM_EPS};
pub use tensor::{checksum_all, Tensor};
