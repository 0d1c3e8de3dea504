//! Tiny causal decoder language model: 4 transformer layers, width 256,
//! 4 heads. Attention is shaped entirely by the mask supplied with the
//! assembled token sequence, so visual payload blocks stay bidirectional
//! while text and generation tokens remain causal.

use crate::error::{Error, Result};
use crate::llm::vocab::{self, Vocabulary};
use crate::numerics::tensor::Tensor;
use crate::numerics::{Graph, ParamStore, Var};
use crate::projectors::sequence::{SpecialTokens, TokenSequence};
use crate::rng::SeedRng;

#[derive(Clone, Debug)]
pub struct LlmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
}

impl Default for LlmConfig {
    fn default() -> LlmConfig {
        LlmConfig {
            d_model: 256,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_context: 1024,
        }
    }
}

/// rows of the base embedding table: UNK/BOS/EOS plus the word slots
pub const BASE_EMBED_ROWS: usize = 3 + vocab::WORD_COUNT;

fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeedRng) {
    let std = 1.0 / (fan_in as f32).sqrt();
    store.insert(
        &format!("{name}.w"),
        Tensor::randn(&[fan_in, fan_out], std, rng),
        true,
    );
    store.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]), true);
}

fn init_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(&format!("{name}.g"), Tensor::full(&[dim], 1.0), true);
    store.insert(&format!("{name}.b"), Tensor::zeros(&[dim]), true);
}

pub fn init_llm(store: &mut ParamStore, cfg: &LlmConfig, rng: &mut SeedRng) {
    let d = cfg.d_model;
    store.insert(
        "llm.embed",
        Tensor::randn(&[BASE_EMBED_ROWS, d], 0.05, rng),
        true,
    );
    store.insert("llm.special_embed", Tensor::randn(&[6, d], 0.05, rng), true);
    store.insert(
        "llm.gen_embed",
        Tensor::randn(&[vocab::GEN_COUNT, d], 0.05, rng),
        true,
    );
    for l in 0..cfg.n_layers {
        init_norm(store, &format!("llm.l{l}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, &format!("llm.l{l}.attn.{proj}"), d, d, rng);
        }
        init_norm(store, &format!("llm.l{l}.ln2"), d);
        init_linear(store, &format!("llm.l{l}.ffn1"), d, cfg.d_ff, rng);
        init_linear(store, &format!("llm.l{l}.ffn2"), cfg.d_ff, d, rng);
    }
    init_norm(store, "llm.lnf", d);
    init_linear(store, "llm.head", d, vocab::VOCAB_SIZE, rng);
}

/// Map a vocabulary id onto its row in the base embedding table.
/// Block specials and generation ids live in separate tables.
fn base_embed_row(id: usize) -> Result<usize> {
    if id <= vocab::EOS {
        Ok(id)
    } else if (vocab::WORD_BASE..vocab::GEN_BASE).contains(&id) {
        Ok(id - 6)
    } else {
        Err(Error::InvalidValue(format!(
            "token id {id} has no base embedding row"
        )))
    }
}

/// Embed a run of text token ids as [T, D] rows.
pub fn embed_text(g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
    let rows: Vec<usize> = ids
        .iter()
        .map(|&id| base_embed_row(id))
        .collect::<Result<_>>()?;
    let table = g.param(store, "llm.embed");
    g.gather_rows(table, &rows)
}

/// Block-framing special tokens, one [1, D] row each, drawn from their own
/// learnable table so they can train without touching the text vocabulary.
pub fn special_tokens(g: &mut Graph, store: &ParamStore) -> Result<SpecialTokens> {
    let table = g.param(store, "llm.special_embed");
    let row = |g: &mut Graph, i: usize| g.slice_rows(table, i, 1);
    Ok(SpecialTokens {
        img_begin: row(g, 0)?,
        img_end: row(g, 1)?,
        pc_begin: row(g, 2)?,
        pc_end: row(g, 3)?,
        mod_img: row(g, 4)?,
        mod_pc: row(g, 5)?,
    })
}

/// All 259 generation-token embeddings in id order, [259, D].
pub fn gen_embeddings(g: &mut Graph, store: &ParamStore) -> Result<Var> {
    Ok(g.param(store, "llm.gen_embed"))
}

/// Sinusoidal position table for a sequence of length n.
pub fn position_table(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    let data = t.data_mut();
    for pos in 0..n {
        for i in 0..d / 2 {
            let rate = (10000f64).powf(-2.0 * i as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + 2 * i] = angle.sin() as f32;
            data[pos * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    t
}

/// Base projection plus any attached low-rank adapter on the same name.
pub fn linear_adapted(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    let base = g.linear(x, w, Some(b))?;
    let a_name = format!("{name}.lora.a");
    if !store.contains(&a_name) {
        return Ok(base);
    }
    let a = g.param(store, &a_name);
    let bm = g.param(store, &format!("{name}.lora.b"));
    let down = g.matmul(x, a)?;
    let up = g.matmul(down, bm)?;
    // alpha equals rank, so the adapter scale alpha/rank is exactly one
    g.add(base, up)
}

fn attention_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    mask: &Tensor,
    heads: usize,
) -> Result<Var> {
    let d = g.value(x).shape()[1];
    let hd = d / heads;
    let q = linear_adapted(g, store, &format!("{prefix}.q"), x)?;
    let k = linear_adapted(g, store, &format!("{prefix}.k"), x)?;
    let v = linear_adapted(g, store, &format!("{prefix}.v"), x)?;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        outs.push(g.attention(qh, kh, vh, Some(mask), scale)?);
    }
    let cat = g.concat_cols(&outs)?;
    linear_adapted(g, store, &format!("{prefix}.o"), cat)
}

#[derive(Clone, Copy, Debug)]
pub struct LlmOutput {
    /// final hidden states, [L, D]
    pub hidden: Var,
    /// next-token logits for every position, [L, vocab]
    pub logits: Var,
}

/// Run the decoder over an assembled sequence. The sequence mask decides
/// who attends to whom; position information is a fixed sinusoid added to
/// every slot. Identical inputs produce bit-identical outputs.
pub fn llm_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &LlmConfig,
    seq: &TokenSequence,
) -> Result<LlmOutput> {
    let n = seq.len();
    if n > cfg.max_context {
        return Err(Error::ContextOverflow {
            got: n,
            cap: cfg.max_context,
        });
    }
    let d = cfg.d_model;
    let pe = g.constant(position_table(n, d));
    let mut x = g.add(seq.embeddings, pe)?;
    for l in 0..cfg.n_layers {
        let ln1 = {
            let gain = g.param(store, &format!("llm.l{l}.ln1.g"));
            let bias = g.param(store, &format!("llm.l{l}.ln1.b"));
            g.layer_norm(x, gain, bias)?
        };
        let att = attention_block(g, store, &format!("llm.l{l}.attn"), ln1, &seq.mask, cfg.n_heads)?;
        x = g.add(x, att)?;
        let ln2 = {
            let gain = g.param(store, &format!("llm.l{l}.ln2.g"));
            let bias = g.param(store, &format!("llm.l{l}.ln2.b"));
            g.layer_norm(x, gain, bias)?
        };
        let f1 = {
            let w = g.param(store, &format!("llm.l{l}.ffn1.w"));
            let b = g.param(store, &format!("llm.l{l}.ffn1.b"));
            let h = g.linear(ln2, w, Some(b))?;
            g.silu(h)
        };
        let f2 = {
            let w = g.param(store, &format!("llm.l{l}.ffn2.w"));
            let b = g.param(store, &format!("llm.l{l}.ffn2.b"));
            g.linear(f1, w, Some(b))?
        };
        x = g.add(x, f2)?;
    }
    let hidden = {
        let gain = g.param(store, "llm.lnf.g");
        let bias = g.param(store, "llm.lnf.b");
        g.layer_norm(x, gain, bias)?
    };
    let logits = {
        let w = g.param(store, "llm.head.w");
        let b = g.param(store, "llm.head.b");
        g.linear(hidden, w, Some(b))?
    };
    Ok(LlmOutput { hidden, logits })
}

/// Next-token cross entropy over the text span: position i predicts text
/// token i+1, so the last text slot is supervised only when a target for
/// it exists beyond the prompt.
pub fn text_next_token_loss(
    g: &mut Graph,
    out: &LlmOutput,
    seq: &TokenSequence,
    target_ids: &[usize],
    supervised_from: usize,
) -> Result<Var> {
    let n = g.value(out.logits).shape()[0];
    if seq.text_len != target_ids.len() {
        return Err(Error::InvalidValue(format!(
            "target length {} does not match text span {}",
            target_ids.len(),
            seq.text_len
        )));
    }
    let mut targets = vec![0usize; n];
    let mut active = vec![false; n];
    for i in 0..seq.text_len.saturating_sub(1) {
        let pos = seq.text_start + i;
        if i + 1 >= supervised_from {
            targets[pos] = target_ids[i + 1];
            active[pos] = true;
        }
    }
    if !active.iter().any(|&a| a) {
        return Err(Error::InvalidValue("no supervised text positions".into()));
    }
    g.cross_entropy_rows(out.logits, &targets, &active)
}

/// Convenience wrapper used by training and evaluation when only raw text
/// is involved: [BOS] + tokens + [EOS].
pub fn frame_text(voc: &Vocabulary, text: &str) -> Vec<usize> {
    let mut ids = vec![vocab::BOS];
    ids.extend(voc.tokenize(text));
    ids.push(vocab::EOS);
    ids
}
