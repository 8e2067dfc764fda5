//! Minimal reverse-mode neural-network kernels.
//!
//! Layers record their inputs on a [`Tape`] during a training forward pass;
//! [`Sequential::backward`] replays the tape in reverse. Everything is `f64`.

mod gradcheck;
mod layers;
mod network;
mod optim;
mod persist;
mod tensor;

pub use gradcheck::{finite_difference, relative_error};
pub use layers::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, dense_backward, dense_forward,
    leaky_relu_backward, leaky_relu_forward, ConvGeometry, LayerGrads, LayerParams,
};
pub use network::{GradSet, Layer, Sequential, Tape};
pub use optim::{adam_step, adam_step_layers, cosine_lr, AdamState, CosineSchedule};
pub use persist::{read_tensors, write_tensors, FORMAT_VERSION, MAGIC};
pub use tensor::Tensor;

/// Leaky-rectifier slope used after every hidden layer.
pub const LEAKY_SLOPE: f64 = 0.01;
