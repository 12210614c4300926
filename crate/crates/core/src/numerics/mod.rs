//! Dense tensors and tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, REL_FLOOR};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::{log_softmax, softmax, Real, Tensor};
