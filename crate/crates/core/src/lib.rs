//! Training, pseudo-labeling, and inference for joint emotion/intent
//! classification over pre-extracted multimodal embeddings.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod encoding;
pub mod error;
pub mod evalens;
pub mod heads;
pub mod interaction;
pub mod model;
pub mod pipeline;
pub mod pseudo;
pub mod train;

pub use error::{Error, Result};
