//! scenelang: a desk-scale multimodal pipeline. Synthetic 3D scenes and their
//! renders are projected into a small language model's token space; hidden
//! states of dedicated generation tokens condition a latent diffusion model;
//! generated views are fitted into 3D Gaussian splats which can then be edited
//! through instruction-driven iterative dataset update.

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod genmap;
pub mod imageio;
pub mod llm;
pub mod numerics;
pub mod projectors;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
