use scenelang::diffusion::codec::{init_codec, GEN_IMAGE_SIDE};
use scenelang::diffusion::{latent_decode, latent_encode, psnr, train_codec};
use scenelang::numerics::tensor::Tensor;
use scenelang::numerics::ParamStore;
use scenelang::rng::{next_uniform, stream};
use scenelang::synthdata::render::render_object_views;
use scenelang::synthdata::scene::{generate_scene, SceneConfig};

#[test]
#[ignore]
fn probe_codec_convergence() {
    let mut images: Vec<Tensor> = Vec::new();
    for seed in 0..10u64 {
        let scene = generate_scene(
            400 + seed,
            &SceneConfig { min_objects: 1, max_objects: 1, points_per_object: 32, ..SceneConfig::default() },
        )
        .unwrap();
        images.extend(render_object_views(&scene.objects[0], GEN_IMAGE_SIDE));
    }
    let mut rng = stream(3, "diff.test.aug");
    let augmented: Vec<Tensor> = images
        .iter()
        .step_by(5)
        .map(|img| {
            let k = next_uniform(&mut rng, 0.0, 0.6);
            img.map(|v| v * k)
        })
        .collect();
    let held_out: Vec<Tensor> = images.split_off(80);
    let mut train: Vec<Tensor> = images;
    train.extend(augmented);

    let mut store = ParamStore::new();
    let mut rng = stream(5, "diff.test.codec");
    init_codec(&mut store, &mut rng);
    for round in 0..4 {
        let trace = train_codec(&mut store, &train, 500, 2e-3, 11 + round).unwrap();
        let last: f32 = trace[trace.len() - 50..].iter().sum::<f32>() / 50.0;
        let eval = |set: &[Tensor]| -> f64 {
            let mut total = 0.0f64;
            for img in set {
                let z = latent_encode(&store, img).unwrap();
                let back = latent_decode(&store, &z).unwrap();
                total += psnr(img, &back);
            }
            total / set.len() as f64
        };
        eprintln!(
            "steps {}: train loss {last:.5} ({:.1} dB), train psnr {:.2}, held-out psnr {:.2}",
            (round + 1) * 500,
            -10.0 * (last as f64).log10(),
            eval(&train[..20]),
            eval(&held_out)
        );
    }
    for (i, img) in held_out.iter().enumerate() {
        let z = latent_encode(&store, img).unwrap();
        let back = latent_decode(&store, &z).unwrap();
        eprintln!("held-out[{i}]: {:.2} dB", psnr(img, &back));
        if i < 3 {
            scenelang::imageio::save_png(img, std::path::Path::new(&format!("/tmp/ho{i}_in.png"))).unwrap();
            scenelang::imageio::save_png(&back, std::path::Path::new(&format!("/tmp/ho{i}_out.png"))).unwrap();
        }
    }
}
