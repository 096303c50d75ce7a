//! Minimal reverse-mode differentiation substrate.
//!
//! A [`Graph`] records tensor operations during a forward pass and
//! propagates gradients back to the trainable entries of a [`ParamSet`].
//! Everything is generic over [`Real`] so the same model code can run in
//! `f32` for training and in `f64` for finite-difference gradient checks.

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod mlp;
mod params;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use kernels::{attend_row, layer_norm_row, log_softmax_row, matmul, softmax_row_in_place};
pub use mlp::{mlp_forward, Activation, LayerSpec};
pub use params::{AdamConfig, Grads, ParamSet};
pub use tensor::{Real, Tensor};
