//! Dense tensors and tape-based reverse-mode differentiation.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, NORM_FLOOR};
pub use tape::{AttnMask, Tape, Var};
pub use tensor::{argmax, Tensor};
