//! Dense `f32` tensors with tape-based reverse-mode differentiation.
//!
//! The crate is deliberately small: the handful of layer types needed by
//! tiny convolutional denoisers (convolution, dense, feature modulation,
//! nearest upsampling, channel concat/broadcast, pooling, embedding lookup),
//! an AdamW optimiser, EMA weight tracking, and counter-based random streams.

mod error;
mod kernels;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{ema_update, AdamWConfig, OptimizerState};
pub use params::{BoundParams, ParamId, ParamSet};
pub use rng::{Rng, RngState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
