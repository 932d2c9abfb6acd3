//! A small reverse-mode automatic differentiation engine over `f64` tensors.
//!
//! Everything trainable in this crate is expressed on top of it: the LoRA
//! factors, the depth decoder and pose network, the warp, and the losses.
//! Double precision throughout keeps finite-difference checks meaningful.

mod graph;
mod image_ops;
mod ops;
mod params;
mod tensor;

pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use params::{Binding, Param, ParamGroup, ParamId, ParamStore};
pub use tensor::{broadcast_shape, numel, reduce_to_shape, Tensor};

#[cfg(test)]
mod tests;
