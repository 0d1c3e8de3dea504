//! Low-rank adapters on the attention projections. The up-projection
//! starts at zero, so a freshly attached adapter leaves the model output
//! bit-identical until training moves it.

use crate::error::{Error, Result};
use crate::llm::model::LlmConfig;
use crate::numerics::tensor::Tensor;
use crate::numerics::ParamStore;
use crate::rng::SeedRng;

pub const LORA_RANK: usize = 32;

/// Adapter target names: every attention projection in every layer.
pub fn lora_targets(cfg: &LlmConfig) -> Vec<String> {
    let mut names = Vec::new();
    for l in 0..cfg.n_layers {
        for proj in ["q", "k", "v", "o"] {
            names.push(format!("llm.l{l}.attn.{proj}"));
        }
    }
    names
}

pub fn attach_lora(
    store: &mut ParamStore,
    targets: &[String],
    rank: usize,
    rng: &mut SeedRng,
) -> Result<()> {
    if rank == 0 {
        return Err(Error::InvalidValue("adapter rank must be positive".into()));
    }
    for t in targets {
        let w_name = format!("{t}.w");
        if !store.contains(&w_name) {
            return Err(Error::UnknownParameter(w_name));
        }
        let shape = store.tensor(&w_name).shape().to_vec();
        let (d_in, d_out) = (shape[0], shape[1]);
        let a_name = format!("{t}.lora.a");
        if store.contains(&a_name) {
            return Err(Error::InvalidValue(format!("adapter already attached on {t}")));
        }
        let std = 1.0 / (d_in as f32).sqrt();
        store.insert(&a_name, Tensor::randn(&[d_in, rank], std, rng), true);
        store.insert(&format!("{t}.lora.b"), Tensor::zeros(&[rank, d_out]), true);
    }
    Ok(())
}

/// Names of every adapter tensor currently in the store.
pub fn lora_parameter_names(store: &ParamStore) -> Vec<String> {
    store
        .names()
        .filter(|n| n.contains(".lora."))
        .map(|n| n.to_string())
        .collect()
}
