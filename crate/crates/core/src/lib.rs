//! Iterative enhancement of a toy text-to-image diffusion model through
//! synthesis-understanding interaction, curated image pairs, differential
//! LoRA training, and fusion of the learned updates back into the base.

pub mod curation;
pub mod diffusion;
pub mod error;
pub mod interaction;
pub mod lora;
pub mod orchestrator;
pub mod seed;
pub mod tensor;
pub mod training;
pub mod world;

pub use error::{Error, Result};
