pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
mod gemm;
pub mod gradsuite;
pub mod layers;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Tensor};
