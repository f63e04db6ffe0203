//! Minimal dense-tensor engine: `f32` storage, tape-based reverse-mode
//! autodiff, the convolution/normalization layers needed by a DCGAN and a
//! small dense network, Adam, and the `MFCK` checkpoint format.

pub mod checkpoint;
pub mod error;
mod kernels;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use nn::Track;
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore};
pub use tape::{BatchNormMode, BinaryOp, Gradients, Tape, UnaryOp, Var};
pub use tensor::Tensor;
