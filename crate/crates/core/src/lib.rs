//! Toy latent-diffusion inpainting stack with cross-attention decoy protection.

mod error;

pub mod attack;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod harness;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod params;
pub mod predictor;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
