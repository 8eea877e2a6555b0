//! Guided depth-map super-resolution with progressive attention.
//!
//! The crate bundles a minimal dense-tensor engine with reverse-mode
//! automatic differentiation, the PAG-Net model (residual dense networks
//! gated by depth-derived spatial attention), a degradation/patch data
//! pipeline, an ADAM training loop and an RMSE evaluation harness.
//!
//! All numeric code is generic over the scalar type (`f32` or `f64`) via
//! [`Scalar`]; concrete aliases live at the crate root. Training and
//! inference default to `f32`, the gradient-check suites run at `f64`.

#![forbid(unsafe_code)]

pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod shape;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use shape::Shape;
pub use tape::{Gradients, Tape};
pub use tensor::Tensor;

/// Default precision for training and inference.
pub type Tensor32 = Tensor<f32>;
/// Double precision, used by the gradient-check suites.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type PagNet32 = model::PagNet<f32>;
pub type PagNet64 = model::PagNet<f64>;
