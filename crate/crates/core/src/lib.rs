pub mod adapt;
pub mod data;
pub mod error;
pub mod experiment;
pub mod figure;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
