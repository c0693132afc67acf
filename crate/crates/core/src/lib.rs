pub mod audio;
pub mod bitstream;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod par;
pub mod quant;
pub mod strategy;
pub mod teacher;
pub mod train;

pub use error::{Error, Result};
