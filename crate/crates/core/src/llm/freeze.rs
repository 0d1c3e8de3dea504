//! Stage-wise freeze policy. Each training stage trains a disjoint,
//! explicitly named slice of the parameter store; everything else must
//! hash identically before and after training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// generation alignment: condition mapper, denoiser, generation-token
    /// embeddings
    One,
    /// instruction tuning: adapters plus the modality projectors
    Two,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
        }
    }
}

/// Decide whether one parameter trains in the given stage.
pub fn trains_in_stage(name: &str, stage: Stage) -> bool {
    match stage {
        Stage::One => {
            name.starts_with("gmap.") || name.starts_with("den.") || name == "llm.gen_embed"
        }
        Stage::Two => {
            name.contains(".lora.")
                || name.starts_with("penc.")
                || name.starts_with("res3d.")
                || name.starts_with("img.")
                || name.starts_with("spos.")
                || name == "llm.special_embed"
        }
    }
}

/// Names that train in the given stage, in store order.
pub fn trainable_parameters(store: &ParamStore, stage: Stage) -> Vec<String> {
    store
        .names()
        .filter(|n| trains_in_stage(n, stage))
        .map(|n| n.to_string())
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FreezeManifest {
    pub stage: String,
    /// every parameter name mapped to whether it trains in this stage
    pub trainable: BTreeMap<String, bool>,
}

impl FreezeManifest {
    pub fn frozen_names(&self) -> Vec<String> {
        self.trainable
            .iter()
            .filter(|(_, &t)| !t)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable
            .iter()
            .filter(|(_, &t)| t)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Set the trainable flag of every parameter for the stage and return the
/// manifest that records the decision.
pub fn apply_stage(store: &mut ParamStore, stage: Stage) -> FreezeManifest {
    let names: Vec<String> = store.names().map(|n| n.to_string()).collect();
    let mut trainable = BTreeMap::new();
    for name in names {
        let t = trains_in_stage(&name, stage);
        store.set_trainable(&name, t);
        trainable.insert(name, t);
    }
    FreezeManifest {
        stage: stage.as_str().to_string(),
        trainable,
    }
}

/// Hashes of the frozen slice, taken before training and compared after.
pub fn frozen_hashes(store: &ParamStore, manifest: &FreezeManifest) -> BTreeMap<String, String> {
    store.hashes(&manifest.frozen_names())
}
