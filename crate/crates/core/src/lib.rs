//! Desk-scale laboratory for transfer-based few-shot learning.

pub mod augment;
pub mod cli;
pub mod codec;
pub mod config;
pub mod episodes;
pub mod error;
pub mod evaluate;
pub mod finetune;
pub mod intensity;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
