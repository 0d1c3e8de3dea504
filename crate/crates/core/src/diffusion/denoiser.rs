//! Conditional noise predictor: a small U-shaped conv net over 8x8x4
//! latents (two downsamples, two upsamples, width 64) with one
//! cross-attention onto the condition feature at each resolution.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::{Graph, ParamStore, Var};
use crate::rng::SeedRng;

use super::codec::{LATENT_CHANNELS, LATENT_SIDE};

pub const WIDTH: usize = 64;
const COND_DIM: usize = 256;

fn init_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, std: f32, rng: &mut SeedRng) {
    store.insert(&format!("{name}.w"), Tensor::randn(&[cout, cin, 3, 3], std, rng), true);
    store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]), true);
}

fn init_attn(store: &mut ParamStore, name: &str, rng: &mut SeedRng) {
    let qs = 1.0 / (WIDTH as f32).sqrt();
    let ks = 1.0 / (COND_DIM as f32).sqrt();
    store.insert(&format!("{name}.q.w"), Tensor::randn(&[WIDTH, WIDTH], qs, rng), true);
    store.insert(&format!("{name}.q.b"), Tensor::zeros(&[WIDTH]), true);
    store.insert(&format!("{name}.k.w"), Tensor::randn(&[COND_DIM, WIDTH], ks, rng), true);
    store.insert(&format!("{name}.v.w"), Tensor::randn(&[COND_DIM, WIDTH], ks, rng), true);
    // near-identity residual at init, but still condition-sensitive
    store.insert(&format!("{name}.o.w"), Tensor::randn(&[WIDTH, WIDTH], 0.02, rng), true);
}

pub fn init_denoiser(store: &mut ParamStore, rng: &mut SeedRng) {
    let w = WIDTH;
    store.insert("den.time1.w", Tensor::randn(&[w, w], 1.0 / (w as f32).sqrt(), rng), true);
    store.insert("den.time1.b", Tensor::zeros(&[w]), true);
    let cstd = |cin: usize| 1.0 / ((cin * 9) as f32).sqrt();
    init_conv(store, "den.in", LATENT_CHANNELS, w, cstd(LATENT_CHANNELS), rng);
    init_conv(store, "den.c1", w, w, cstd(w), rng);
    init_conv(store, "den.c2", w, w, cstd(w), rng);
    init_conv(store, "den.mid", w, w, cstd(w), rng);
    init_conv(store, "den.u1", 2 * w, w, cstd(2 * w), rng);
    init_conv(store, "den.u2", 2 * w, w, cstd(2 * w), rng);
    init_conv(store, "den.out", w, LATENT_CHANNELS, 0.02, rng);
    init_attn(store, "den.attn8", rng);
    init_attn(store, "den.attn4", rng);
    init_attn(store, "den.attn2", rng);
}

/// Sinusoidal features of the integer step index.
pub fn time_features(t: usize) -> Tensor {
    let mut f = Tensor::zeros(&[WIDTH]);
    let data = f.data_mut();
    for i in 0..WIDTH / 2 {
        let rate = (10000f64).powf(-2.0 * i as f64 / WIDTH as f64);
        let angle = t as f64 * rate;
        data[2 * i] = angle.sin() as f32;
        data[2 * i + 1] = angle.cos() as f32;
    }
    f
}

fn conv_t(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    temb: Var,
) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    let y = g.conv2d(x, w, Some(b), 1, 1)?;
    let y = g.add_channel(y, temb)?;
    Ok(g.silu(y))
}

fn cross_attn(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    cond: Var,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(x, vec![c, h * w])?;
    let tok = g.transpose(flat)?;
    let qw = g.param(store, &format!("{name}.q.w"));
    let qb = g.param(store, &format!("{name}.q.b"));
    let kw = g.param(store, &format!("{name}.k.w"));
    let vw = g.param(store, &format!("{name}.v.w"));
    let ow = g.param(store, &format!("{name}.o.w"));
    let q = g.linear(tok, qw, Some(qb))?;
    let k = g.matmul(cond, kw)?;
    let v = g.matmul(cond, vw)?;
    let scale = 1.0 / (WIDTH as f32).sqrt();
    let att = g.attention(q, k, v, None, scale)?;
    let proj = g.matmul(att, ow)?;
    let out_tok = g.add(tok, proj)?;
    let back = g.transpose(out_tok)?;
    g.reshape(back, vec![c, h, w])
}

fn channel_concat(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let sa = g.value(a).shape().to_vec();
    let sb = g.value(b).shape().to_vec();
    let fa = g.reshape(a, vec![sa[0], sa[1] * sa[2]])?;
    let fb = g.reshape(b, vec![sb[0], sb[1] * sb[2]])?;
    let cat = g.concat_rows(&[fa, fb])?;
    g.reshape(cat, vec![sa[0] + sb[0], sa[1], sa[2]])
}

/// Predict the noise in f_t given the step index and the condition rows.
pub fn predict_noise(
    g: &mut Graph,
    store: &ParamStore,
    f_t: Var,
    t: usize,
    cond: Var,
) -> Result<Var> {
    let shape = g.value(f_t).shape().to_vec();
    if shape != [LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE] {
        return Err(Error::ShapeMismatch(format!(
            "denoiser expects [{LATENT_CHANNELS}, {LATENT_SIDE}, {LATENT_SIDE}], got {shape:?}"
        )));
    }
    let temb = {
        let raw = g.constant(time_features(t).reshaped(vec![1, WIDTH]));
        let w = g.param(store, "den.time1.w");
        let b = g.param(store, "den.time1.b");
        let h = g.linear(raw, w, Some(b))?;
        let h = g.silu(h);
        g.reshape(h, vec![WIDTH])?
    };
    let e0 = conv_t(g, store, "den.in", f_t, temb)?;
    let e0a = cross_attn(g, store, "den.attn8", e0, cond)?;
    let p1 = g.avg_pool2(e0a)?;
    let e1 = conv_t(g, store, "den.c1", p1, temb)?;
    let e1a = cross_attn(g, store, "den.attn4", e1, cond)?;
    let p2 = g.avg_pool2(e1a)?;
    let e2 = conv_t(g, store, "den.c2", p2, temb)?;
    let mid = conv_t(g, store, "den.mid", e2, temb)?;
    let mida = cross_attn(g, store, "den.attn2", mid, cond)?;
    let u1 = g.upsample2x(mida)?;
    let cat1 = channel_concat(g, u1, e1a)?;
    let d1 = conv_t(g, store, "den.u1", cat1, temb)?;
    let u2 = g.upsample2x(d1)?;
    let cat2 = channel_concat(g, u2, e0a)?;
    let d2 = conv_t(g, store, "den.u2", cat2, temb)?;
    let w = g.param(store, "den.out.w");
    let b = g.param(store, "den.out.b");
    g.conv2d(d2, w, Some(b), 1, 1)
}

/// Tensor-level wrapper for samplers and guidance.
pub fn predict_noise_t(
    store: &ParamStore,
    f_t: &Tensor,
    t: usize,
    cond: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(f_t.clone(), false);
    let c = g.leaf(cond.clone(), false);
    let y = predict_noise(&mut g, store, x, t, c)?;
    Ok(g.value(y).clone())
}
