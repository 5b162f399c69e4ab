//! Core mechanisms of a multi-modal single object tracker.
//!
//! Everything is generic over the scalar type; the `*64` aliases at the crate
//! root are the double-precision instantiations used by the harness.

pub mod autodiff;
pub mod boxhead;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod rama;
pub mod scalar;

pub use error::{Error, Result};
pub use numerics::{AdditiveMask, Tensor};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type AdapterBlock64 = rama::AdapterBlock<f64>;
pub type BBox64 = losses::BBox<f64>;
pub type Tracker64 = model::Tracker<f64>;
pub type Graph64<'s> = autodiff::Graph<'s, f64>;
pub type LossWeights64 = losses::LossWeights<f64>;
