pub mod ehr;
pub mod audit;
pub mod featurize;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod error;
pub mod rng;
pub mod trainer;
pub mod synth;

pub use error::{Error, Result};
