//! Reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! A [`Graph`] records every op of one forward pass together with its
//! vector-Jacobian product. Ops are deterministic: reductions run in a fixed
//! order and the matrix kernels are single-threaded, so identical inputs give
//! bit-identical values and gradients.

pub mod gradcheck;
mod graph;
mod linalg;
mod ops;
mod optim;
mod params;
mod tensor;

pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::{flip_tensor, permute_tensor, sigmoid, softplus};
pub use optim::Adam;
pub use params::{gaussian, he_uniform, ParamError, ParamStore, ParamVars};
pub use tensor::{broadcast_shape, numel, strides, Tensor};
