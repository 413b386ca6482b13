//! Differentially private training with model-guided heterogeneous noise.
//!
//! The crate provides baseline DP-SGD and a guided variant whose Gaussian
//! noise is shaped per layer by a PCA of the current weights, a zCDP privacy
//! accountant, a federated simulator and diagnostics for the noise/model
//! relationship. Numeric code is generic over [`Scalar`] (`f32` or `f64`);
//! the `*64`/`*32` aliases below fix the precision.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod data;
pub mod diagnostics;
pub mod dp_optim;
pub mod error;
pub mod federated;
pub mod guidance;
pub mod io;
pub mod nn;
pub mod numerics;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type ModelState64 = nn::ModelState<f64>;
pub type ModelState32 = nn::ModelState<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type NoiseGuidance64 = guidance::NoiseGuidance<f64>;
pub type NoiseGuidance32 = guidance::NoiseGuidance<f32>;
pub type EigenResult64 = numerics::EigenResult<f64>;
