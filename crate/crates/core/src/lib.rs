pub mod adapter;
pub mod checkpoint;
pub mod contextforge;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evalsuite;
pub mod graph;
pub mod model;
mod nn;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
