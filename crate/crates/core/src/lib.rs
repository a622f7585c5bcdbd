#![allow(clippy::needless_range_loop)]

pub mod diffcore;
pub mod error;
pub mod eval;
pub mod int_runtime;
pub mod mps;
pub mod nas;
pub mod pipeline;
pub mod pit;
pub mod scalar;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = diffcore::Tensor<f32>;
pub type Tensor64 = diffcore::Tensor<f64>;
pub type Graph32 = diffcore::ModelGraph<f32>;
pub type Graph64 = diffcore::ModelGraph<f64>;
