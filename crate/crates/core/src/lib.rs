//! Gated ensembles of spatio-temporal mixture-of-experts networks for
//! multi-task ride-hailing forecasting.
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`); the aliases
//! below fix the working precision used by training and the CLI.

pub mod cli;
pub mod data;
pub mod error;
pub mod interpret;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
