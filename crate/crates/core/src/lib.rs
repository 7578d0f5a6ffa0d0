//! Fourier coarse-to-fine image inpainting.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the single-precision types used by
//! training and the command-line tool.

#[macro_use]
mod macros;

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod extractor;
pub mod generator;
pub mod losses;
pub mod masks;
pub mod nn;
pub mod optim;
pub mod spectral;
pub mod training;
pub mod viz;

pub use config::{FcfConfig, Preset};
pub use error::{ConfigError, FcfError, Result};
pub use fcf_tensor::{Scalar, Tape, Tensor, Var};

pub type Generator = generator::Generator<f32>;
pub type Discriminator = discriminator::Discriminator<f32>;
pub type ImageBatch = Tensor<f32>;
pub type MaskBatch = Tensor<f32>;
