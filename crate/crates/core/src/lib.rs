pub mod data;
pub mod marginal;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod refine;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
