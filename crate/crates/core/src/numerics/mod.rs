//! Minimal dense-tensor kernel with reverse-mode automatic differentiation.
//!
//! Everything the similarity encoder needs and nothing more: rank-1/rank-2
//! f32 tensors, a tape-style [`Graph`] recording eager ops (matmul, LSTM
//! gates, cosine, hinge loss), exact reverse-order backpropagation, and an
//! Adam optimizer with global-norm gradient clipping.
//!
//! Reductions (dot products, norms, means) accumulate in f64 and round to
//! f32 on write-back; parameters and activations are stored as f32.

mod adam;
mod graph;
mod tensor;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use graph::{lstm_cell, Graph, LstmCellWeights, NodeId};
pub use tensor::Tensor;

pub(crate) use graph::cosine_parts;
