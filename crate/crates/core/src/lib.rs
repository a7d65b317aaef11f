pub mod attn_encoder;
pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod nn;
pub mod same;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
