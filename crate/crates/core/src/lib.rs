pub mod backbone;
pub mod bev;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod model;
pub mod params;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
