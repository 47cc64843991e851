pub mod dataset;
pub mod detect;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod neural;
pub mod predictors;
pub mod rng;
pub mod tuning;

pub use error::{Error, Result};
