//! Minimal NCHW tensors with reverse-mode differentiation.
//!
//! Enough machinery to train a small convolutional network on the CPU:
//! convolution, batch normalization, ReLU, sub-pixel shuffles, channel
//! concatenation and slicing, an MSE loss, and Adam. Everything runs on a
//! single thread with a fixed reduction order, so results are bit-identical
//! from run to run.

mod adam;
mod conv;
mod error;
pub mod gradcheck;
mod norm;
mod param;
mod scalar;
mod shuffle;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use norm::{BatchNormStats, Mode};
pub use param::{Param, ParamSet, BATCHES_TRACKED, RUNNING_MEAN, RUNNING_VAR};
pub use scalar::{DType, Scalar};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};

use rand::Rng;

/// Kaiming-uniform initialization for a ReLU layer with the given fan-in:
/// samples from `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}
