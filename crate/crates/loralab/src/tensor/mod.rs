//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! The design is a dynamic tape: leaf tensors ([`Tensor`]) hold data and an
//! optional gradient buffer, and a [`Graph`] records every operation applied
//! through it. Calling [`Graph::backward`] on a scalar loss walks the tape
//! in reverse and accumulates adjoints into every tensor that was created
//! with `requires_grad`. Frozen tensors take part in the forward pass but
//! never receive gradients.

mod element;
mod graph;
mod handle;
pub(crate) mod kernels;

pub use element::{Dtype, Element};
pub use graph::{Graph, COSINE_EPS, LAYER_NORM_EPS};
pub use handle::Tensor;

#[cfg(test)]
mod tests;
