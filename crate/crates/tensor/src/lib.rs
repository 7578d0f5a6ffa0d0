//! Dense tensors with a tape-based reverse-mode autodiff engine.
//!
//! The engine is generic over [`Scalar`] (`f32` or `f64`) and covers exactly
//! what a convolutional GAN with spectral layers needs: broadcasting
//! arithmetic, reductions, matrix products, 2-D convolutions, nearest
//! up/down-sampling and real 2-D FFTs. Backward rules are expressed with the
//! same differentiable operations, so second-order gradients work.

pub mod conv;
pub mod fft;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use conv::ConvOpts;
pub use scalar::Scalar;
pub use tape::{sigmoid, softplus, Tape, Var};
pub use tensor::{broadcast_shape, numel, strides, Tensor};
