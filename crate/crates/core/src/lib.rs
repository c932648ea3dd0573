//! Diverse image inpainting: a hierarchical VQ-VAE codec, an autoregressive
//! prior over structural codes and a structure-guided texture generator.

pub mod archive;
pub mod attention;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod ops;
pub mod structure;
pub mod texture;
pub mod training;

pub use error::{Error, Result};
