//! Dense f64 tensors with a tape-based reverse-mode autodiff engine.
//!
//! A [`Graph`] records primitive operations in execution order. Leaves are
//! either constants or copies of [`Parameter`] values; after
//! [`Graph::backward`] the gradients of trainable leaves can be folded back
//! into their parameters with [`Graph::accumulate_into`].

mod gradcheck;
mod graph;
mod optim;
mod param;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{AttnLayout, Graph, Var};
pub use optim::{Adam, AdamConfig, Moments};
pub use param::{ParamStore, Parameter};
pub use tensor::Tensor;

/// Epsilon used by every layer normalization in the toolkit.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
