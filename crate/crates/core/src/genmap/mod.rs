//! Condition mapping: append the fixed block of generation tokens to a
//! sequence, pull their hidden states out of the decoder, and project them
//! through learnable queries into the diffusion condition. Includes the
//! classifier-free zero-feature dropout.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::{Graph, ParamStore, Var};
use crate::projectors::points::multi_head_attention;
use crate::projectors::sequence::TokenSequence;
use crate::projectors::Role;
use crate::rng::{next_uniform, SeedRng};

/// rows in the condition feature
pub const CONDITION_LEN: usize = 77;
/// feature width, matching the denoiser's attention width
pub const CONDITION_DIM: usize = 256;
/// size of the generation-token block
pub const GEN_TOKENS: usize = 259;
const MAP_LAYERS: usize = 2;
const HEADS: usize = 4;

/// Condition input to the denoiser. The null feature is the exact zero
/// tensor and doubles as the negative prompt at inference.
#[derive(Clone, Debug)]
pub struct ConditionFeature {
    pub values: Tensor,
    pub is_null: bool,
}

impl ConditionFeature {
    pub fn new(values: Tensor) -> ConditionFeature {
        let is_null = values.data().iter().all(|&v| v == 0.0);
        ConditionFeature { values, is_null }
    }

    pub fn null() -> ConditionFeature {
        ConditionFeature {
            values: Tensor::zeros(&[CONDITION_LEN, CONDITION_DIM]),
            is_null: true,
        }
    }
}

fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeedRng) {
    let std = 1.0 / (fan_in as f32).sqrt();
    store.insert(&format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng), true);
    store.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]), true);
}

fn init_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(&format!("{name}.g"), Tensor::full(&[dim], 1.0), true);
    store.insert(&format!("{name}.b"), Tensor::zeros(&[dim]), true);
}

pub fn init_condition_mapper(store: &mut ParamStore, rng: &mut SeedRng) {
    let d = CONDITION_DIM;
    store.insert(
        "gmap.query",
        Tensor::randn(&[CONDITION_LEN, d], 0.05, rng),
        true,
    );
    for l in 0..MAP_LAYERS {
        init_norm(store, &format!("gmap.l{l}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, &format!("gmap.l{l}.attn.{proj}"), d, d, rng);
        }
        init_norm(store, &format!("gmap.l{l}.ln2"), d);
        init_linear(store, &format!("gmap.l{l}.ffn1"), d, 2 * d, rng);
        init_linear(store, &format!("gmap.l{l}.ffn2"), 2 * d, d, rng);
    }
    init_linear(store, "gmap.mlp1", d, 2 * d, rng);
    init_linear(store, "gmap.mlp2", 2 * d, d, rng);
}

/// Append the fixed 259-token generation block to a sequence that does not
/// have one yet. The new slots are causal: they see every valid earlier
/// slot, and nothing earlier sees them.
pub fn append_generation_tokens(
    g: &mut Graph,
    store: &ParamStore,
    seq: &TokenSequence,
) -> Result<TokenSequence> {
    if seq.gen_len != 0 {
        return Err(Error::InvalidValue(
            "generation tokens already appended".into(),
        ));
    }
    let old = seq.len();
    let gen = g.param(store, "llm.gen_embed");
    let gen_rows = g.value(gen).shape()[0];
    debug_assert_eq!(gen_rows, GEN_TOKENS);
    let embeddings = g.concat_rows(&[seq.embeddings, gen])?;
    let total = old + GEN_TOKENS;
    let mut roles = seq.roles.clone();
    let mut valid = seq.valid.clone();
    roles.extend(std::iter::repeat(Role::Generation).take(GEN_TOKENS));
    valid.extend(std::iter::repeat(true).take(GEN_TOKENS));
    let mut mask = Tensor::zeros(&[total, total]);
    {
        let md = mask.data_mut();
        let od = seq.mask.data();
        for i in 0..old {
            md[i * total..i * total + old].copy_from_slice(&od[i * old..(i + 1) * old]);
        }
        for i in old..total {
            for j in 0..=i {
                if valid[j] {
                    md[i * total + j] = 1.0;
                }
            }
        }
    }
    Ok(TokenSequence {
        embeddings,
        roles,
        mask,
        valid,
        payload_spans: seq.payload_spans.clone(),
        text_start: seq.text_start,
        text_len: seq.text_len,
        gen_start: old,
        gen_len: GEN_TOKENS,
    })
}

/// Positions of the generation block inside a sequence.
pub fn generation_positions(seq: &TokenSequence) -> Vec<usize> {
    (seq.gen_start..seq.gen_start + seq.gen_len).collect()
}

/// Cross-attend learnable queries over the generation-token hidden states
/// and project to the condition shape. Differentiable end to end.
pub fn map_to_condition(
    g: &mut Graph,
    store: &ParamStore,
    hidden: Var,
    gen_positions: &[usize],
) -> Result<Var> {
    if gen_positions.len() != GEN_TOKENS {
        return Err(Error::InvalidValue(format!(
            "expected {GEN_TOKENS} generation positions, got {}",
            gen_positions.len()
        )));
    }
    let feats = g.gather_rows(hidden, gen_positions)?;
    let mut x = g.param(store, "gmap.query");
    for l in 0..MAP_LAYERS {
        let ln1 = {
            let gain = g.param(store, &format!("gmap.l{l}.ln1.g"));
            let bias = g.param(store, &format!("gmap.l{l}.ln1.b"));
            g.layer_norm(x, gain, bias)?
        };
        let att = {
            let q_w = g.param(store, &format!("gmap.l{l}.attn.q.w"));
            let q_b = g.param(store, &format!("gmap.l{l}.attn.q.b"));
            let k_w = g.param(store, &format!("gmap.l{l}.attn.k.w"));
            let k_b = g.param(store, &format!("gmap.l{l}.attn.k.b"));
            let v_w = g.param(store, &format!("gmap.l{l}.attn.v.w"));
            let v_b = g.param(store, &format!("gmap.l{l}.attn.v.b"));
            let o_w = g.param(store, &format!("gmap.l{l}.attn.o.w"));
            let o_b = g.param(store, &format!("gmap.l{l}.attn.o.b"));
            multi_head_attention(g, ln1, feats, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, HEADS)?
        };
        x = g.add(x, att)?;
        let ln2 = {
            let gain = g.param(store, &format!("gmap.l{l}.ln2.g"));
            let bias = g.param(store, &format!("gmap.l{l}.ln2.b"));
            g.layer_norm(x, gain, bias)?
        };
        let f1 = {
            let w = g.param(store, &format!("gmap.l{l}.ffn1.w"));
            let b = g.param(store, &format!("gmap.l{l}.ffn1.b"));
            let h = g.linear(ln2, w, Some(b))?;
            g.silu(h)
        };
        let f2 = {
            let w = g.param(store, &format!("gmap.l{l}.ffn2.w"));
            let b = g.param(store, &format!("gmap.l{l}.ffn2.b"));
            g.linear(f1, w, Some(b))?
        };
        x = g.add(x, f2)?;
    }
    let m1 = {
        let w = g.param(store, "gmap.mlp1.w");
        let b = g.param(store, "gmap.mlp1.b");
        let h = g.linear(x, w, Some(b))?;
        g.silu(h)
    };
    let w = g.param(store, "gmap.mlp2.w");
    let b = g.param(store, "gmap.mlp2.b");
    g.linear(m1, w, Some(b))
}

/// Per-sample classifier-free dropout decision.
pub fn cfg_drop(p: f32, rng: &mut SeedRng) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidValue(format!(
            "dropout probability {p} outside [0, 1]"
        )));
    }
    Ok(next_uniform(rng, 0.0, 1.0) < p)
}

/// Replace the feature with the null feature with probability p.
pub fn cfg_dropout(
    f: &ConditionFeature,
    p: f32,
    rng: &mut SeedRng,
) -> Result<ConditionFeature> {
    if cfg_drop(p, rng)? {
        Ok(ConditionFeature::null())
    } else {
        Ok(f.clone())
    }
}
