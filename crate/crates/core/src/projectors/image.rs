//! Image branch: three patch encoders concatenated along channels, a
//! 16-query global branch, and segment-pooled local tokens, together filling
//! one 256-slot block.

use crate::error::Result;
use crate::imageio::resize_bilinear;
use crate::numerics::tensor::Tensor;
use crate::numerics::{Graph, ParamStore, Var};
use crate::projectors::resample::{cross_attend, init_cross_attention, QUERY_COUNT};
use crate::projectors::{Modality, ModalityBlock, PAYLOAD_SLOTS};
use crate::rng::SeedRng;

pub const IMAGE_SIDE: usize = 224;
pub const PATCH: usize = 14;
const GRID: usize = IMAGE_SIDE / PATCH;
pub const LOCAL_TOKENS: usize = GRID * GRID;
pub const LOCAL_SLOTS: usize = PAYLOAD_SLOTS - QUERY_COUNT;

/// Channel widths of the three patch encoders; they sum to d_model.
pub fn encoder_widths(d_model: usize) -> [usize; 3] {
    let base = d_model / 3;
    [d_model - 2 * base, base, base]
}

pub fn init_image_encoder(store: &mut ParamStore, d_model: usize, rng: &mut SeedRng) {
    let patch_dim = 3 * PATCH * PATCH;
    for (i, width) in encoder_widths(d_model).into_iter().enumerate() {
        let std = (1.0 / patch_dim as f32).sqrt();
        store.insert(&format!("img.patch{i}.w"), Tensor::randn(&[patch_dim, width], std, rng), true);
        store.insert(&format!("img.patch{i}.b"), Tensor::zeros(&[width]), true);
    }
    init_cross_attention(store, "img.global", QUERY_COUNT, d_model, d_model, d_model, rng);
}

/// Deterministic split of the 256 local tokens into 240 segments; sixteen
/// segments hold two tokens, the rest one.
pub fn local_pool_segments() -> Vec<Vec<usize>> {
    (0..LOCAL_SLOTS)
        .map(|i| {
            let lo = i * LOCAL_TOKENS / LOCAL_SLOTS;
            let hi = (i + 1) * LOCAL_TOKENS / LOCAL_SLOTS;
            (lo..hi).collect()
        })
        .collect()
}

/// Full image payload: 16 global query tokens then 240 pooled local tokens.
/// Inputs of any resolution are bilinearly resized to 224 first.
pub fn encode_image(g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<ModalityBlock> {
    let resized = resize_bilinear(image, IMAGE_SIDE, IMAGE_SIDE)?;
    let x = g.leaf(resized, false);
    encode_image_var(g, store, x)
}

/// Same but from an existing [3,224,224] graph variable.
pub fn encode_image_var(g: &mut Graph, store: &ParamStore, x: Var) -> Result<ModalityBlock> {
    let patches = g.extract_patches(x, PATCH, PATCH)?;
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let w = g.param(store, &format!("img.patch{i}.w"));
        let b = g.param(store, &format!("img.patch{i}.b"));
        parts.push(g.linear(patches, w, Some(b))?);
    }
    let local = g.concat_cols(&parts)?;
    let global = cross_attend(g, store, "img.global", local)?;
    let segments = local_pool_segments();
    let pooled = g.group_mean_rows(local, &segments)?;
    let payload = g.concat_rows(&[global, pooled])?;
    Ok(ModalityBlock {
        tokens: payload,
        mask: vec![true; PAYLOAD_SLOTS],
        modality: Modality::Image,
    })
}
