//! Dense tensors, reverse-mode differentiation, Adam and a finite-difference checker.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use optim::{global_norm, Adam, AdamConfig};
pub use tape::{bce_with_logits, sigmoid, Gradients, Tape, Var};
pub use tensor::{ParamSet, Tensor};
