//! Minimal reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! replays them in reverse. Stop-gradient is expressed with [`Tape::detach`],
//! which records a value copy as a constant leaf.

pub mod gradcheck;
mod kernels;
pub mod sgd;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use sgd::{SgdConfig, SgdState};
pub use tape::{logistic_bce_value, BatchNormConfig, BatchNormStats, BinaryOp, BnMode, ReduceOp, Tape, UnaryOp, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;

#[cfg(test)]
mod tests;
