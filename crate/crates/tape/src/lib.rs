//! Reverse-mode automatic differentiation over dense row-major `f32` tensors.
//!
//! A [`Graph`] records every operation of one forward pass; calling
//! [`Graph::backward`] on a scalar returns gradients for the leaves created
//! with [`Graph::param`]. Leaves made with [`Graph::constant`] never receive
//! gradients, and operations whose inputs are all constant keep no backward
//! rule, so frozen sub-networks cost only their forward pass plus whatever is
//! needed to reach differentiable inputs.
//!
//! Matrix products go through `matrixmultiply`; convolutions are lowered to
//! per-sample im2col + GEMM.

pub mod check;
mod graph;
mod ops;
mod optim;
mod tensor;

pub use graph::{Backward, BackwardCtx, Gradients, Graph, Var};
pub use ops::{channel_moments, crop_resize_tensor, CropBox};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph error: {0}")]
    Graph(String),
}

pub type Result<T> = std::result::Result<T, TapeError>;
