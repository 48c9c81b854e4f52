//! Federated learning on long-tailed, non-IID client data with server-side
//! ensemble calibration and distillation.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checking); the aliases below fix the common instantiations.

// Negated comparisons are how parameter checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod binio;
pub mod calibration;
pub mod data;
pub mod distillation;
pub mod error;
pub mod eval;
pub mod fed;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use scalar::{sigmoid, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Mlp = nn::MlpModel<f32>;
pub type Mlp64 = nn::MlpModel<f64>;
pub type Calibration = calibration::CalibrationParams<f32>;
pub type Calibration64 = calibration::CalibrationParams<f64>;
pub type Teacher<'a> = calibration::Teacher<'a, f32>;
pub type Federation = fed::FederationState<f32>;
