//! PPG to ECG waveform reconstruction with a hierarchical shifted-patch
//! attention transformer, plus a multimodal PPG + reconstructed-ECG classifier.
//!
//! All model math is generic over [`numerics::Scalar`] (`f32` for training and
//! inference, `f64` for gradient checking); the aliases below fix the common
//! instantiations.

pub mod data;
pub mod error;
pub mod multimodal;
pub mod numerics;
pub mod preprocess;
pub mod reconstructor;
pub mod rng;
pub mod spa;

pub use error::{Error, Result};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;
