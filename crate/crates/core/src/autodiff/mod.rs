//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Double precision throughout. A [`Tape`] records one forward pass; after
//! [`Tape::backward`] the gradients of bound parameters are pushed into the
//! owning [`ParamStore`] with [`Tape::accumulate_into`].

mod gemm;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{KernelGroup, Tape, Var};
pub use tensor::Tensor;

/// Variance floor used by layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
