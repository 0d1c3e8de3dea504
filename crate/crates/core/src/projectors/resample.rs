//! Learnable-query cross-attention resampling, mask padding to the 256-slot
//! payload, and the scene position signal for point blocks.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::{Graph, ParamStore, Var};
use crate::projectors::{Modality, ModalityBlock, PAYLOAD_SLOTS};
use crate::rng::SeedRng;
use crate::synthdata::scene::Box3;

pub const QUERY_COUNT: usize = 16;

/// Registers a query bank plus projection weights under `prefix`.
pub fn init_cross_attention(
    store: &mut ParamStore,
    prefix: &str,
    n_queries: usize,
    d_query: usize,
    d_feature: usize,
    d_out: usize,
    rng: &mut SeedRng,
) {
    let std_q = (1.0 / d_query as f32).sqrt();
    store.insert(&format!("{prefix}.queries"), Tensor::randn(&[n_queries, d_query], std_q, rng), true);
    store.insert(&format!("{prefix}.wq"), Tensor::randn(&[d_query, d_query], std_q, rng), true);
    store.insert(
        &format!("{prefix}.wk"),
        Tensor::randn(&[d_feature, d_query], (1.0 / d_feature as f32).sqrt(), rng),
        true,
    );
    store.insert(
        &format!("{prefix}.wv"),
        Tensor::randn(&[d_feature, d_out], (1.0 / d_feature as f32).sqrt(), rng),
        true,
    );
    store.insert(
        &format!("{prefix}.wo"),
        Tensor::randn(&[d_out, d_out], (1.0 / d_out as f32).sqrt(), rng),
        true,
    );
    store.insert(&format!("{prefix}.bo"), Tensor::zeros(&[d_out]), true);
}

/// Queries attend over the features once; no residual on the query side, so
/// a single input feature yields the same output at every query slot.
pub fn cross_attend(g: &mut Graph, store: &ParamStore, prefix: &str, features: Var) -> Result<Var> {
    let queries = g.param(store, &format!("{prefix}.queries"));
    let wq = g.param(store, &format!("{prefix}.wq"));
    let wk = g.param(store, &format!("{prefix}.wk"));
    let wv = g.param(store, &format!("{prefix}.wv"));
    let wo = g.param(store, &format!("{prefix}.wo"));
    let bo = g.param(store, &format!("{prefix}.bo"));
    let q = g.matmul(queries, wq)?;
    let k = g.matmul(features, wk)?;
    let v = g.matmul(features, wv)?;
    let d_attend = g.value(q).shape()[1];
    let scale = 1.0 / (d_attend as f32).sqrt();
    let mixed = g.attention(q, k, v, None, scale)?;
    let out = g.matmul(mixed, wo)?;
    g.add_row_bias(out, bo)
}

pub fn init_point_resampler(store: &mut ParamStore, d_point: usize, d_model: usize, rng: &mut SeedRng) {
    init_cross_attention(store, "res3d", QUERY_COUNT, d_point, d_point, d_model, rng);
}

/// 16 aligned tokens from variable-length point features.
pub fn resample_queries(g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
    if g.value(features).shape()[0] == 0 {
        return Err(Error::ShapeMismatch("resample_queries: no input features".into()));
    }
    cross_attend(g, store, "res3d", features)
}

/// First k slots valid, the rest zero-embedded with mask=false.
pub fn pad_with_mask(g: &mut Graph, tokens: Var, modality: Modality) -> Result<ModalityBlock> {
    let shape = g.value(tokens).shape().to_vec();
    let (k, d) = (shape[0], shape[1]);
    if k > PAYLOAD_SLOTS {
        return Err(Error::BlockOverflow { got: k, cap: PAYLOAD_SLOTS });
    }
    let mut mask = vec![true; k];
    mask.resize(PAYLOAD_SLOTS, false);
    let padded = if k == PAYLOAD_SLOTS {
        tokens
    } else if k == 0 {
        g.leaf(Tensor::zeros(&[PAYLOAD_SLOTS, d]), false)
    } else {
        let zeros = g.leaf(Tensor::zeros(&[PAYLOAD_SLOTS - k, d]), false);
        g.concat_rows(&[tokens, zeros])?
    };
    Ok(ModalityBlock { tokens: padded, mask, modality })
}

pub fn init_scene_position(store: &mut ParamStore, d_model: usize, rng: &mut SeedRng) {
    store.insert("spos.w", Tensor::randn(&[6, d_model], 0.02, rng), true);
    store.insert("spos.b", Tensor::zeros(&[d_model]), true);
}

/// Adds a learned linear embedding of (center, half-extents) to every valid
/// token; masked slots stay exactly zero.
pub fn add_scene_position_encoding(
    g: &mut Graph,
    store: &ParamStore,
    block: &ModalityBlock,
    boxv: &Box3,
) -> Result<ModalityBlock> {
    let w = g.param(store, "spos.w");
    let b = g.param(store, "spos.b");
    let coords = Tensor::from_vec(
        vec![1, 6],
        vec![
            boxv.center[0], boxv.center[1], boxv.center[2],
            boxv.half[0], boxv.half[1], boxv.half[2],
        ],
    );
    let cv = g.leaf(coords, false);
    let emb = g.linear(cv, w, Some(b))?;
    let valid = Tensor::from_vec(
        vec![PAYLOAD_SLOTS, 1],
        block.mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect(),
    );
    let vv = g.leaf(valid, false);
    let tiled = g.matmul(vv, emb)?;
    let tokens = g.add(block.tokens, tiled)?;
    Ok(ModalityBlock { tokens, mask: block.mask.clone(), modality: block.modality })
}
