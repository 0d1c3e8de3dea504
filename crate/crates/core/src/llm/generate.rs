//! Autoregressive text decoding over full multimodal prompts. Each step
//! rebuilds the sequence from scratch, so decoding is a pure function of
//! the store, the prompt, and the decode rule.

use crate::error::Result;
use crate::llm::model::{self, LlmConfig};
use crate::llm::vocab::{self, Vocabulary};
use crate::numerics::tensor::Tensor;
use crate::numerics::{Graph, ParamStore};
use crate::projectors::image::encode_image;
use crate::projectors::points::encode_points;
use crate::projectors::resample::{add_scene_position_encoding, pad_with_mask, resample_queries};
use crate::projectors::sequence::{assemble_sequence, TokenSequence};
use crate::projectors::Modality;
use crate::rng::stream;
use crate::synthdata::scene::Box3;

#[derive(Clone, Copy, Debug)]
pub enum Decode {
    Greedy,
    TopK { k: usize, seed: u64 },
}

/// Everything a decoding step needs to rebuild its input sequence.
#[derive(Clone, Default)]
pub struct ScenePrompt {
    /// optional [3, H, W] scene image
    pub image: Option<Tensor>,
    /// per-object normalized point samples [n, 6] with their boxes
    pub point_sets: Vec<(Tensor, Box3)>,
    /// instruction token ids, BOS included
    pub prompt_ids: Vec<usize>,
}

/// Assemble image block + one block per point set + prompt text + any
/// already-generated suffix into a model-ready sequence.
pub fn build_prompt_sequence(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &LlmConfig,
    prompt: &ScenePrompt,
    suffix_ids: &[usize],
) -> Result<TokenSequence> {
    let image_block = match &prompt.image {
        Some(img) => Some(encode_image(g, store, img)?),
        None => None,
    };
    let mut object_blocks = Vec::with_capacity(prompt.point_sets.len());
    for (points, boxv) in &prompt.point_sets {
        let feats = encode_points(g, store, points)?;
        let tokens = resample_queries(g, store, feats)?;
        let block = pad_with_mask(g, tokens, Modality::PointCloud)?;
        let block = add_scene_position_encoding(g, store, &block, boxv)?;
        object_blocks.push(block);
    }
    let mut ids = prompt.prompt_ids.clone();
    ids.extend_from_slice(suffix_ids);
    let text = if ids.is_empty() {
        None
    } else {
        Some(model::embed_text(g, store, &ids)?)
    };
    let specials = model::special_tokens(g, store)?;
    assemble_sequence(
        g,
        image_block.as_ref(),
        &object_blocks,
        text,
        None,
        &specials,
        cfg.max_context,
    )
}

fn is_text_candidate(id: usize) -> bool {
    id < vocab::GEN_BASE && !(vocab::IMG_BEGIN..=vocab::MOD_PC).contains(&id)
}

fn pick_token(logits: &[f32], decode: Decode, rng_state: &mut Option<crate::rng::SeedRng>) -> usize {
    let candidates: Vec<usize> = (0..logits.len()).filter(|&i| is_text_candidate(i)).collect();
    match decode {
        Decode::Greedy => candidates
            .iter()
            .copied()
            .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap().then(b.cmp(&a)))
            .unwrap(),
        Decode::TopK { k, seed } => {
            let rng = rng_state.get_or_insert_with(|| stream(seed, "decode.topk"));
            let mut ranked = candidates;
            ranked.sort_by(|&a, &b| {
                logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b))
            });
            ranked.truncate(k.max(1));
            let m = ranked.iter().map(|&i| logits[i]).fold(f32::NEG_INFINITY, f32::max);
            let weights: Vec<f64> = ranked.iter().map(|&i| ((logits[i] - m) as f64).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = crate::rng::next_uniform(rng, 0.0, 1.0) as f64 * total;
            for (i, w) in ranked.iter().zip(&weights) {
                if u < *w {
                    return *i;
                }
                u -= w;
            }
            *ranked.last().unwrap()
        }
    }
}

/// Decode up to max_len text tokens after the prompt, stopping early at
/// EOS. Greedy decoding is deterministic; top-k follows its seed.
pub fn generate_text(
    store: &ParamStore,
    cfg: &LlmConfig,
    voc: &Vocabulary,
    prompt: &ScenePrompt,
    max_len: usize,
    decode: Decode,
) -> Result<String> {
    let mut suffix: Vec<usize> = Vec::new();
    let mut rng_state = None;
    for _ in 0..max_len {
        let mut g = Graph::new();
        let seq = build_prompt_sequence(&mut g, store, cfg, prompt, &suffix)?;
        let out = model::llm_forward(&mut g, store, cfg, &seq)?;
        let logits = g.value(out.logits);
        let last = seq.text_start + seq.text_len - 1;
        let v = logits.shape()[1];
        let row = &logits.data()[last * v..(last + 1) * v];
        let id = pick_token(row, decode, &mut rng_state);
        if id == vocab::EOS {
            break;
        }
        suffix.push(id);
    }
    Ok(voc.detokenize(&suffix))
}
