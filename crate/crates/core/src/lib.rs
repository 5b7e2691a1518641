pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod cost;
pub mod data;
pub mod error;
pub mod ffn;
pub mod gradcheck;
pub mod gradsuite;
pub mod model;
pub mod ops;
pub mod par;
pub mod params;
pub mod redundancy;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
