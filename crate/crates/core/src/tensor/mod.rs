//! Dense tensors with reverse-mode automatic differentiation.

mod dense;
mod element;
pub mod gradcheck;
pub mod kernels;
mod tape;

pub use dense::{ParamId, ParamStore, Tensor};
pub use element::{DType, Element};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Segment, Tape, Var};
