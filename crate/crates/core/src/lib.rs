//! PolyViT: one transformer co-trained on image, video and audio
//! classification tasks.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
