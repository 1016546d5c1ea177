//! Dense tensors, reverse-mode differentiation and the AdamW update.

mod adamw;
mod tape;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use tape::{poisson_unit_deviance, Gradients, Tape, Var};
pub use tape::{sigmoid, softplus, softplus_inv};
pub use tensor::{Mask, Tensor};
