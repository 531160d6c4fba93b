//! Minimal reverse-mode differentiation engine.
//!
//! A [`Graph`] records one forward pass as a flat list of nodes. Parameters
//! live outside the graph in a [`ParamStore`] and enter it as leaves; calling
//! [`Graph::backward`] on a scalar node accumulates gradients into the store.
//! Activations are NCHW tensors. EEG trials enter as `N x 1 x m x c` images so
//! temporal kernels are `k x 1` and spatial kernels are `1 x c`.

mod graph;
pub mod gradcheck;
pub mod init;
pub mod optim;
mod ops;
mod params;
mod scalar;
mod tensor;

pub use graph::{BatchStats, Graph, NodeId};
pub use ops::{ConvGeom, PoolGeom};
pub use params::{ParamGroup, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
