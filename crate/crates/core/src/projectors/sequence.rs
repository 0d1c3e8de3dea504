//! Token sequence assembly: visual blocks framed by special tokens, then
//! text, then optional generation tokens, with the combined attention mask.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::{Graph, Var};
use crate::projectors::{Modality, ModalityBlock, Role, BLOCK_LEN, PAYLOAD_SLOTS};

/// Embedding rows for the block-framing tokens, each of shape [1, D].
#[derive(Clone, Copy)]
pub struct SpecialTokens {
    pub img_begin: Var,
    pub img_end: Var,
    pub pc_begin: Var,
    pub pc_end: Var,
    pub mod_img: Var,
    pub mod_pc: Var,
}

#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub embeddings: Var,
    pub roles: Vec<Role>,
    /// row-attends-column permission matrix, 1.0 = visible
    pub mask: Tensor,
    /// which slots carry real content (padding slots are false)
    pub valid: Vec<bool>,
    /// payload start of each visual block, with its modality
    pub payload_spans: Vec<(usize, Modality)>,
    pub text_start: usize,
    pub text_len: usize,
    pub gen_start: usize,
    pub gen_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}

/// Order: image block, point blocks in scene order, text, generation
/// tokens. Valid tokens inside one visual block see each other both ways;
/// everything else is causal. Masked slots are invisible and see only
/// themselves so their softmax rows stay defined.
pub fn assemble_sequence(
    g: &mut Graph,
    image_block: Option<&ModalityBlock>,
    object_blocks: &[ModalityBlock],
    text: Option<Var>,
    generation: Option<Var>,
    specials: &SpecialTokens,
    max_context: usize,
) -> Result<TokenSequence> {
    let mut parts: Vec<Var> = Vec::new();
    let mut roles: Vec<Role> = Vec::new();
    let mut block_id: Vec<usize> = Vec::new();
    let mut valid: Vec<bool> = Vec::new();
    let mut payload_spans = Vec::new();
    let mut next_block = 1usize;

    let mut push_block = |parts: &mut Vec<Var>,
                          roles: &mut Vec<Role>,
                          block_id: &mut Vec<usize>,
                          valid: &mut Vec<bool>,
                          payload_spans: &mut Vec<(usize, Modality)>,
                          block: &ModalityBlock| {
        let (begin, end, modality_token, role) = match block.modality {
            Modality::Image => (specials.img_begin, specials.img_end, specials.mod_img, Role::Image),
            Modality::PointCloud => (specials.pc_begin, specials.pc_end, specials.mod_pc, Role::Point),
        };
        let id = next_block;
        next_block += 1;
        payload_spans.push((roles.len() + 1, block.modality));
        parts.push(begin);
        roles.push(Role::Special);
        block_id.push(id);
        valid.push(true);
        parts.push(block.tokens);
        for m in &block.mask {
            roles.push(role);
            block_id.push(id);
            valid.push(*m);
        }
        parts.push(end);
        roles.push(Role::Special);
        block_id.push(id);
        valid.push(true);
        parts.push(modality_token);
        roles.push(Role::Special);
        block_id.push(id);
        valid.push(true);
    };

    if let Some(b) = image_block {
        if b.mask.len() != PAYLOAD_SLOTS {
            return Err(Error::ShapeMismatch(format!(
                "image block has {} slots",
                b.mask.len()
            )));
        }
        push_block(&mut parts, &mut roles, &mut block_id, &mut valid, &mut payload_spans, b);
    }
    for b in object_blocks {
        if b.mask.len() != PAYLOAD_SLOTS {
            return Err(Error::ShapeMismatch(format!(
                "point block has {} slots",
                b.mask.len()
            )));
        }
        push_block(&mut parts, &mut roles, &mut block_id, &mut valid, &mut payload_spans, b);
    }

    let text_start = roles.len();
    let mut text_len = 0;
    if let Some(t) = text {
        text_len = g.value(t).shape()[0];
        parts.push(t);
        for _ in 0..text_len {
            roles.push(Role::Text);
            block_id.push(0);
            valid.push(true);
        }
    }
    let gen_start = roles.len();
    let mut gen_len = 0;
    if let Some(gv) = generation {
        gen_len = g.value(gv).shape()[0];
        parts.push(gv);
        for _ in 0..gen_len {
            roles.push(Role::Generation);
            block_id.push(0);
            valid.push(true);
        }
    }

    let total = roles.len();
    if total == 0 {
        return Err(Error::ShapeMismatch("empty sequence".into()));
    }
    if total > max_context {
        return Err(Error::ContextOverflow { got: total, cap: max_context });
    }
    debug_assert_eq!(
        total,
        payload_spans.len() * BLOCK_LEN + text_len + gen_len
    );

    let mut mask = Tensor::zeros(&[total, total]);
    {
        let md = mask.data_mut();
        for i in 0..total {
            if !valid[i] {
                md[i * total + i] = 1.0;
                continue;
            }
            for j in 0..total {
                if !valid[j] {
                    continue;
                }
                let visible = j <= i || (block_id[i] != 0 && block_id[i] == block_id[j]);
                if visible {
                    md[i * total + j] = 1.0;
                }
            }
        }
    }

    let embeddings = g.concat_rows(&parts)?;
    Ok(TokenSequence {
        embeddings,
        roles,
        mask,
        valid,
        payload_spans,
        text_start,
        text_len,
        gen_start,
        gen_len,
    })
}
