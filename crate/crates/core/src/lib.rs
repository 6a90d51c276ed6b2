pub mod arrayio;
pub mod autodiff;
pub mod baselines;
pub mod epsim;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod metainfer;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod sparse;
pub mod surrogate;
pub mod training;

pub use error::{Error, Result};
