//! Spiking neural network engine for learning sparse spike encodings of
//! channel impulse responses and classifying human activity from them.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod classifier;
pub mod corpus;
pub mod data_io;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod lif;
pub mod metrics;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod preprocess;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
