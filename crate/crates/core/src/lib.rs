pub mod augmentation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod curation;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fewshot;
pub mod frame;
pub mod head;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
