//! Sketch animation by distilling motion from a small video diffusion model
//! into the control points of vector strokes.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod lora;
pub mod metrics;
mod nn;
pub mod optim;
pub mod pgm;
pub mod raster;
pub mod sds;
pub mod sketch;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
