pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod raster;
pub mod registration;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
