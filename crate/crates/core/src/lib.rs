//! A small pixel-space text-conditional diffusion engine whose attention
//! sub-blocks can be individually scaled on every denoising loop.

pub mod attnmod;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod nn;
pub mod raster;
pub mod scan;
pub mod strategy;
pub mod trainer;
pub mod unet;
pub mod vocab;

pub use error::{Error, Result};
