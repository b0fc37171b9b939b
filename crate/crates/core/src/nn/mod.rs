//! Small reverse-mode autodiff kernel in `f64`.
//!
//! A [`Graph`] records operations on [`Tensor`] values; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every node.
//! Trainable tensors live in a [`ParamStore`], which also owns the Adam
//! state and checkpoint I/O.

mod graph;
pub mod gradcheck;
mod layers;
mod params;
mod tensor;

pub use graph::{Grads, Graph, Unary, Var};
pub use layers::{
    pixel_shuffle, pixel_shuffle_index, pixel_unshuffle, pixel_unshuffle_index, Gru, LayerNorm, Linear,
    MultiHeadAttention,
};
pub use params::{lr_at_epoch, AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor;
