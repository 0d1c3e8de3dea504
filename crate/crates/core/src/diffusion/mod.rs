//! Latent diffusion: image/latent codec, cosine schedule, conditional
//! denoiser, noise-prediction loss, and the guided ancestral sampler.

pub mod codec;
pub mod denoiser;
pub mod sampler;
pub mod schedule;

use crate::error::Result;
use crate::numerics::{Graph, Var};

pub use codec::{
    latent_decode, latent_encode, psnr, train_codec, GEN_IMAGE_SIDE, LATENT_CHANNELS, LATENT_SIDE,
};
pub use denoiser::{init_denoiser, predict_noise, predict_noise_t};
pub use sampler::{cfg_combine, sample, SampleOutput, DEFAULT_SAMPLE_STEPS};
pub use schedule::{add_noise, invert_noise, NoiseSchedule, DEFAULT_STEPS};

/// Noise-prediction objective: elementwise mean squared error.
pub fn ldm_loss(g: &mut Graph, eps: Var, eps_pred: Var) -> Result<Var> {
    g.mse(eps_pred, eps)
}
