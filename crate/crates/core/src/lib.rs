//! Bayesian hierarchical temporal sparse regression for national stillbirth
//! rates: data screening, definitional adjustment, model fitting with a
//! No-U-Turn sampler, and out-of-sample validation.

pub mod adjust;
pub mod data;
pub mod error;
pub mod estimate;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod ratio;
pub mod rng;
pub mod sampler;
pub mod simulate;
pub mod spline;
pub mod validation;
pub mod variance;

pub use error::{Error, Result};
