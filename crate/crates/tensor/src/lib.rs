//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every op returns a fresh [`Tensor`]; when grad mode is on and an input
//! requires gradients, the result remembers how to push its gradient back to
//! its inputs. [`Tensor::backward`] on a scalar walks that graph once in
//! reverse topological order and accumulates into trainable leaves.
//!
//! Execution is single-threaded and every reduction runs in a fixed order,
//! so identical inputs give bit-identical outputs.

mod error;
pub mod gradcheck;
mod ops;
mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use tensor::{grad_enabled, no_grad, BackwardFn, NoGradGuard, Tensor};
