pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod fewshot;
pub mod imaging;
pub mod inp;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod residual;
pub mod scoring;
pub mod synthdata;
pub mod synthesis;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
