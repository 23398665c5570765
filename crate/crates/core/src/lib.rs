//! Semantics-guided graph network (SGN) for skeleton-based action recognition.
//!
//! The crate bundles a small reverse-mode tensor kernel ([`tensor`]), the
//! skeleton data pipeline ([`data`]), the network itself ([`embedding`],
//! [`joint`], [`frame`], [`model`]), training ([`train`]) and evaluation
//! ([`eval`]). All numeric code is generic over [`Scalar`]; the aliases below
//! pick the usual precisions.

pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod frame;
pub mod joint;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
