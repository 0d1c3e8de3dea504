//! Small convolutional autoencoder between 64x64 RGB renders and 8x8x4
//! latents. Trained once on synthetic renders, then frozen; both
//! directions are deterministic at inference.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::{Adam, Graph, ParamStore, Var};
use crate::rng::{stream, SeedRng};

pub const GEN_IMAGE_SIDE: usize = 64;
pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIDE: usize = 8;

fn init_conv(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut SeedRng,
) {
    let std = 1.0 / ((cin * 9) as f32).sqrt();
    store.insert(
        &format!("{name}.w"),
        Tensor::randn(&[cout, cin, 3, 3], std, rng),
        true,
    );
    store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]), true);
}

pub fn init_codec(store: &mut ParamStore, rng: &mut SeedRng) {
    init_conv(store, "codec.e1", 3, 16, rng);
    init_conv(store, "codec.e2", 16, 32, rng);
    init_conv(store, "codec.e3", 32, 32, rng);
    init_conv(store, "codec.e4", 32, LATENT_CHANNELS, rng);
    init_conv(store, "codec.d1", LATENT_CHANNELS, 32, rng);
    init_conv(store, "codec.d2", 32, 32, rng);
    init_conv(store, "codec.d3", 32, 16, rng);
    init_conv(store, "codec.d4", 16, 3, rng);
}

fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    g.conv2d(x, w, Some(b), 1, 1)
}

pub fn encode_var(g: &mut Graph, store: &ParamStore, img: Var) -> Result<Var> {
    let shape = g.value(img).shape().to_vec();
    if shape != [3, GEN_IMAGE_SIDE, GEN_IMAGE_SIDE] {
        return Err(Error::ShapeMismatch(format!(
            "codec expects [3, {GEN_IMAGE_SIDE}, {GEN_IMAGE_SIDE}], got {shape:?}"
        )));
    }
    let mut x = conv(g, store, "codec.e1", img)?;
    x = g.silu(x);
    x = g.avg_pool2(x)?;
    x = conv(g, store, "codec.e2", x)?;
    x = g.silu(x);
    x = g.avg_pool2(x)?;
    x = conv(g, store, "codec.e3", x)?;
    x = g.silu(x);
    x = g.avg_pool2(x)?;
    conv(g, store, "codec.e4", x)
}

pub fn decode_var(g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
    let shape = g.value(z).shape().to_vec();
    if shape != [LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE] {
        return Err(Error::ShapeMismatch(format!(
            "latent shape {shape:?}, expected [{LATENT_CHANNELS}, {LATENT_SIDE}, {LATENT_SIDE}]"
        )));
    }
    let mut x = conv(g, store, "codec.d1", z)?;
    x = g.silu(x);
    x = g.upsample2x(x)?;
    x = conv(g, store, "codec.d2", x)?;
    x = g.silu(x);
    x = g.upsample2x(x)?;
    x = conv(g, store, "codec.d3", x)?;
    x = g.silu(x);
    x = g.upsample2x(x)?;
    x = conv(g, store, "codec.d4", x)?;
    Ok(g.sigmoid(x))
}

pub fn latent_encode(store: &ParamStore, img: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(img.clone(), false);
    let z = encode_var(&mut g, store, x)?;
    Ok(g.value(z).clone())
}

pub fn latent_decode(store: &ParamStore, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(z.clone(), false);
    let img = decode_var(&mut g, store, x)?;
    Ok(g.value(img).clone())
}

pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = (x - y) as f64;
        s += d * d;
    }
    let mse = s / a.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    -10.0 * mse.log10()
}

/// Reconstruction pretraining. Returns the per-step loss trace.
pub fn train_codec(
    store: &mut ParamStore,
    images: &[Tensor],
    steps: usize,
    lr: f32,
    seed: u64,
) -> Result<Vec<f32>> {
    if images.is_empty() {
        return Err(Error::InvalidValue("no codec training images".into()));
    }
    let mut rng = stream(seed, "codec.train");
    let mut opt = Adam::new(lr);
    let batch = 4usize.min(images.len());
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        store.zero_grads();
        let mut total = 0.0f32;
        for _ in 0..batch {
            let pick = (crate::rng::next_uniform(&mut rng, 0.0, 1.0) * images.len() as f32)
                .min(images.len() as f32 - 1.0) as usize;
            let mut g = Graph::new();
            let x = g.leaf(images[pick].clone(), false);
            let z = encode_var(&mut g, store, x)?;
            let y = decode_var(&mut g, store, z)?;
            let loss = g.mse(y, x)?;
            g.backward_params(loss, store)?;
            total += g.value(loss).item();
        }
        trace.push(total / batch as f32);
        opt.step(store);
    }
    Ok(trace)
}
