pub mod baselines;
pub mod data;
pub mod model;
pub mod unlearn;
pub mod error;
pub mod eval;
pub mod experiment;

pub use error::{Error, ErrorClass, Result};
