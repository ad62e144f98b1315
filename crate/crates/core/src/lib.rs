pub mod autodiff;
pub mod causal;
pub mod checkpoint;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod tensorio;
pub mod trainer;

pub use error::{Error, Result};
