//! Trainable point-cloud encoder: per-point MLP, deterministic farthest
//! point grouping into 64 centers, mean pooling, one self-attention block.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::{Graph, ParamStore, Var};
use crate::rng::SeedRng;

pub const GROUP_COUNT: usize = 64;
pub const POINT_DIM: usize = 128;
const HEADS: usize = 4;

fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeedRng) {
    let std = (2.0 / (fan_in + fan_out) as f32).sqrt();
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

pub fn init_point_encoder(store: &mut ParamStore, rng: &mut SeedRng) {
    let d = POINT_DIM;
    init_linear(store, "penc.mlp1", 6, d / 2, rng);
    init_linear(store, "penc.mlp2", d / 2, d, rng);
    init_norm(store, "penc.ln1", d);
    init_linear(store, "penc.attn.q", d, d, rng);
    init_linear(store, "penc.attn.k", d, d, rng);
    init_linear(store, "penc.attn.v", d, d, rng);
    init_linear(store, "penc.attn.o", d, d, rng);
    init_norm(store, "penc.ln2", d);
    init_linear(store, "penc.ffn1", d, 2 * d, rng);
    init_linear(store, "penc.ffn2", 2 * d, d, rng);
    init_linear(store, "penc.out", d, d, rng);
}

fn coord_key(p: &[f32]) -> [f32; 3] {
    [p[0], p[1], p[2]]
}

fn lex_less(a: [f32; 3], b: [f32; 3]) -> bool {
    for i in 0..3 {
        if a[i] != b[i] {
            return a[i] < b[i];
        }
    }
    false
}

/// Farthest-point selection of k indices. Selection depends only on the
/// coordinate multiset (ties broken lexicographically), so permuting the
/// input rows permutes indices but not the selected coordinates.
pub fn farthest_point_sample(points: &Tensor, k: usize) -> Vec<usize> {
    let n = points.shape()[0];
    let stride = points.shape()[1];
    let d = points.data();
    let key = |i: usize| coord_key(&d[i * stride..i * stride + 3]);
    let mut first = 0;
    for i in 1..n {
        if lex_less(key(i), key(first)) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    let mut dist: Vec<f32> = (0..n)
        .map(|i| {
            let (a, b) = (key(i), key(first));
            (0..3).map(|j| (a[j] - b[j]) * (a[j] - b[j])).sum()
        })
        .collect();
    while chosen.len() < k.min(n) {
        let mut best = 0;
        for i in 1..n {
            if dist[i] > dist[best] || (dist[i] == dist[best] && lex_less(key(i), key(best))) {
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..n {
            let (a, b) = (key(i), key(best));
            let dd: f32 = (0..3).map(|j| (a[j] - b[j]) * (a[j] - b[j])).sum();
            if dd < dist[i] {
                dist[i] = dd;
            }
        }
    }
    // pad by repeating the first center when there are fewer points than k
    while chosen.len() < k {
        chosen.push(first);
    }
    chosen
}

/// Assigns every point to its nearest center (earliest center wins ties);
/// each center's own point is pinned to it so no group is empty.
pub fn group_by_centers(points: &Tensor, centers: &[usize]) -> Vec<Vec<usize>> {
    let n = points.shape()[0];
    let stride = points.shape()[1];
    let d = points.data();
    let key = |i: usize| coord_key(&d[i * stride..i * stride + 3]);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
    for i in 0..n {
        if let Some(slot) = centers.iter().position(|&c| c == i) {
            groups[slot].push(i);
            continue;
        }
        let p = key(i);
        let mut best = 0usize;
        let mut best_d = f32::INFINITY;
        for (slot, &c) in centers.iter().enumerate() {
            let q = key(c);
            let dd: f32 = (0..3).map(|j| (p[j] - q[j]) * (p[j] - q[j])).sum();
            if dd < best_d {
                best_d = dd;
                best = slot;
            }
        }
        groups[best].push(i);
    }
    for (slot, g) in groups.iter_mut().enumerate() {
        if g.is_empty() {
            g.push(centers[slot]);
        }
    }
    groups
}

fn linear_from(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    g.linear(x, w, Some(b))
}

fn norm_from(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{name}.g"));
    let bias = g.param(store, &format!("{name}.b"));
    g.layer_norm(x, gain, bias)
}

/// Multi-head self/cross attention over row features, no mask.
pub fn multi_head_attention(
    g: &mut Graph,
    q_in: Var,
    kv_in: Var,
    q_w: Var,
    q_b: Var,
    k_w: Var,
    k_b: Var,
    v_w: Var,
    v_b: Var,
    o_w: Var,
    o_b: Var,
    heads: usize,
) -> Result<Var> {
    let q = g.linear(q_in, q_w, Some(q_b))?;
    let k = g.linear(kv_in, k_w, Some(k_b))?;
    let v = g.linear(kv_in, v_w, Some(v_b))?;
    let dim = g.value(q).shape()[1];
    if dim % heads != 0 {
        return Err(Error::ShapeMismatch(format!(
            "attention width {dim} not divisible by {heads} heads"
        )));
    }
    let hd = dim / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hindex in 0..heads {
        let qs = g.slice_cols(q, hindex * hd, hd)?;
        let ks = g.slice_cols(k, hindex * hd, hd)?;
        let vs = g.slice_cols(v, hindex * hd, hd)?;
        outs.push(g.attention(qs, ks, vs, None, scale)?);
    }
    let cat = g.concat_cols(&outs)?;
    g.linear(cat, o_w, Some(o_b))
}

/// Encodes an n x 6 point set into 64 x 128 group features.
pub fn encode_points(g: &mut Graph, store: &ParamStore, points: &Tensor) -> Result<Var> {
    let shape = points.shape().to_vec();
    if shape.len() != 2 || shape[1] != 6 {
        return Err(Error::ShapeMismatch(format!(
            "encode_points expects n x 6, got {shape:?}"
        )));
    }
    let x = g.leaf(points.clone(), false);
    encode_point_var(g, store, x, points)
}

/// Same as encode_points but takes the points as a graph variable so input
/// gradients can be checked; `coords` only steers grouping.
pub fn encode_point_var(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    coords: &Tensor,
) -> Result<Var> {
    let h1 = linear_from(g, store, "penc.mlp1", x)?;
    let h1 = g.silu(h1);
    let h2 = linear_from(g, store, "penc.mlp2", h1)?;
    let feats = g.silu(h2);

    let centers = farthest_point_sample(coords, GROUP_COUNT);
    let groups = group_by_centers(coords, &centers);
    let pooled = g.group_mean_rows(feats, &groups)?;

    let normed = norm_from(g, store, "penc.ln1", pooled)?;
    let names = ["penc.attn.q", "penc.attn.k", "penc.attn.v", "penc.attn.o"];
    let mut p = Vec::new();
    for n in names {
        p.push(g.param(store, &format!("{n}.w")));
        p.push(g.param(store, &format!("{n}.b")));
    }
    let attn = multi_head_attention(
        g, normed, normed, p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], HEADS,
    )?;
    let res1 = g.add(pooled, attn)?;
    let normed2 = norm_from(g, store, "penc.ln2", res1)?;
    let f1 = linear_from(g, store, "penc.ffn1", normed2)?;
    let f1 = g.silu(f1);
    let f2 = linear_from(g, store, "penc.ffn2", f1)?;
    let res2 = g.add(res1, f2)?;
    linear_from(g, store, "penc.out", res2)
}
