//! High-frequency injected window-attention U-Net for image restoration.
//!
//! Everything is generic over a [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the precision for the common cases.

pub mod autodiff;
pub mod bim;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod wim;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{HitError, Result};
pub use model::{Model, ModelConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type Tape64 = Tape<f64>;
