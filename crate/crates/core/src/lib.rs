pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
mod linalg;
pub mod network;
pub mod neuron;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
