use scenelang::diffusion::codec::{init_codec, GEN_IMAGE_SIDE};
use scenelang::diffusion::denoiser::init_denoiser;
use scenelang::diffusion::{
    add_noise, cfg_combine, invert_noise, latent_decode, latent_encode, ldm_loss, predict_noise,
    predict_noise_t, psnr, sample, train_codec, NoiseSchedule, DEFAULT_STEPS, LATENT_CHANNELS,
    LATENT_SIDE,
};
use scenelang::genmap::{ConditionFeature, CONDITION_DIM, CONDITION_LEN};
use scenelang::numerics::findiff::DEFAULT_EPS;
use scenelang::numerics::tensor::Tensor;
use scenelang::numerics::{Graph, ParamStore, Var};
use scenelang::rng::{next_normal, next_uniform, stream};
use scenelang::synthdata::render::{render_object_views, ring_poses};
use scenelang::synthdata::scene::{generate_scene, SceneConfig};
use scenelang::Error;

fn latent_shape() -> Vec<usize> {
    vec![LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE]
}

fn randn(shape: &[usize], seed: u64, label: &str) -> Tensor {
    let mut rng = stream(seed, label);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = next_normal(&mut rng);
    }
    t
}

fn denoiser_store(seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = stream(seed, "diff.test.init");
    init_denoiser(&mut store, &mut rng);
    store
}

#[test]
fn cosine_schedule_starts_at_one_and_decreases() {
    let s = NoiseSchedule::cosine(DEFAULT_STEPS);
    assert_eq!(s.alpha_bar[0], 1.0);
    assert_eq!(s.t_max(), DEFAULT_STEPS);
    for t in 1..=s.t_max() {
        assert!(s.alpha_bar[t] < s.alpha_bar[t - 1], "not decreasing at {t}");
        assert!(s.alpha_bar[t] > 0.0 && s.alpha_bar[t] <= 1.0);
    }
    assert!(s.alpha_bar[DEFAULT_STEPS] < 1e-3);
}

#[test]
fn zero_step_noising_returns_the_latent_exactly() {
    let s = NoiseSchedule::cosine(DEFAULT_STEPS);
    let f = randn(&latent_shape(), 1, "f");
    let eps = randn(&latent_shape(), 2, "eps");
    let f0 = add_noise(&f, 0, &eps, &s).unwrap();
    assert_eq!(f0.data(), f.data());
}

#[test]
fn final_step_noising_is_nearly_pure_noise() {
    let s = NoiseSchedule::cosine(DEFAULT_STEPS);
    let f = randn(&latent_shape(), 3, "f");
    let eps = randn(&latent_shape(), 4, "eps");
    let ft = add_noise(&f, DEFAULT_STEPS, &eps, &s).unwrap();
    let diff = ft.sub(&eps).frobenius_norm() as f64;
    let base = eps.frobenius_norm() as f64;
    assert!(diff / base < 0.05, "ratio {}", diff / base);
}

#[test]
fn noising_variance_matches_the_closed_form() {
    let s = NoiseSchedule::cosine(DEFAULT_STEPS);
    for (case, t) in [(0u64, 50usize), (1, 120)] {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        let mut n = 0usize;
        for draw in 0..40 {
            let f = randn(&latent_shape(), 1000 + case * 100 + draw, "var.f");
            let eps = randn(&latent_shape(), 2000 + case * 100 + draw, "var.eps");
            let ft = add_noise(&f, t, &eps, &s).unwrap();
            for &v in ft.data() {
                sum += v as f64;
                sumsq += (v as f64) * (v as f64);
                n += 1;
            }
        }
        assert!(n >= 10_000);
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let ab = s.alpha_bar[t] as f64;
        let expect = ab * 1.0 + (1.0 - ab);
        assert!(
            (var - expect).abs() / expect < 0.05,
            "t={t}: var {var} vs {expect}"
        );
    }
}

#[test]
fn out_of_range_step_is_rejected() {
    let s = NoiseSchedule::cosine(DEFAULT_STEPS);
    let f = randn(&latent_shape(), 5, "f");
    let eps = randn(&latent_shape(), 6, "eps");
    match add_noise(&f, DEFAULT_STEPS + 1, &eps, &s) {
        Err(Error::InvalidValue(_)) => {}
        other => panic!("expected range error, got {other:?}"),
    }
}

#[test]
fn noise_loss_matches_a_two_loop_oracle() {
    let eps = randn(&latent_shape(), 7, "eps");
    let pred = randn(&latent_shape(), 8, "pred");
    let mut g = Graph::new();
    let a = g.leaf(eps.clone(), false);
    let b = g.leaf(pred.clone(), false);
    let loss = ldm_loss(&mut g, a, b).unwrap();
    let got = g.value(loss).item() as f64;
    let mut oracle = 0.0f64;
    let shape = eps.shape().to_vec();
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    for ci in 0..c {
        for p in 0..hw {
            let i = ci * hw + p;
            let d = (eps.data()[i] - pred.data()[i]) as f64;
            oracle += d * d;
        }
    }
    oracle /= (c * hw) as f64;
    assert!((got - oracle).abs() <= 1e-6, "{got} vs {oracle}");

    let mut g = Graph::new();
    let a = g.leaf(eps.clone(), false);
    let same = g.leaf(eps.clone(), false);
    let zero = ldm_loss(&mut g, a, same).unwrap();
    assert_eq!(g.value(zero).item(), 0.0);

    let mut g = Graph::new();
    let ones = g.leaf(Tensor::full(&latent_shape(), 1.0), false);
    let zeros = g.leaf(Tensor::zeros(&latent_shape()), false);
    let unit = ldm_loss(&mut g, ones, zeros).unwrap();
    assert!((g.value(unit).item() - 1.0).abs() < 1e-7);
}

#[test]
fn denoiser_keeps_latent_shape_and_feels_its_condition() {
    let store = denoiser_store(21);
    let ft = randn(&latent_shape(), 9, "ft");
    let cond_a = randn(&[CONDITION_LEN, CONDITION_DIM], 10, "cond");
    let cond_b = randn(&[CONDITION_LEN, CONDITION_DIM], 11, "cond");
    let ea = predict_noise_t(&store, &ft, 100, &cond_a).unwrap();
    let eb = predict_noise_t(&store, &ft, 100, &cond_b).unwrap();
    assert_eq!(ea.shape(), latent_shape().as_slice());
    let dist = ea.sub(&eb).frobenius_norm();
    assert!(dist > 0.0, "condition is invisible to the denoiser");
    let null = ConditionFeature::null();
    let en = predict_noise_t(&store, &ft, 100, &null.values).unwrap();
    assert!(en.all_finite());
    let et0 = predict_noise_t(&store, &ft, 0, &cond_a).unwrap();
    let et9 = predict_noise_t(&store, &ft, 199, &cond_a).unwrap();
    assert!(et0.sub(&et9).frobenius_norm() > 0.0, "step index ignored");
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let store = denoiser_store(22);
    let ft = randn(&latent_shape(), 12, "ft").map(|v| (v * 1024.0).round() / 1024.0);
    let cond = randn(&[CONDITION_LEN, CONDITION_DIM], 13, "cond")
        .map(|v| (v * 1024.0).round() / 1024.0);
    let weights = {
        let mut rng = stream(14, "probe");
        let mut t = Tensor::zeros(&latent_shape());
        for v in t.data_mut() {
            *v = if next_uniform(&mut rng, 0.0, 1.0) < 0.5 {
                -0.00390625
            } else {
                0.00390625
            };
        }
        t
    };
    let build = |g: &mut Graph, ins: &[Var]| -> Var {
        let y = predict_noise(g, &store, ins[0], 77, ins[1]).unwrap();
        g.weighted_sum(y, &weights).unwrap()
    };
    // analytic gradients once
    let mut g = Graph::new();
    let vf = g.leaf(ft.clone(), true);
    let vc = g.leaf(cond.clone(), true);
    let loss = build(&mut g, &[vf, vc]);
    let grads = g.backward(loss).unwrap();
    let gf = Graph::grad_of(&grads, vf).unwrap().clone();
    let gc = Graph::grad_of(&grads, vc).unwrap().clone();
    // wider step than DEFAULT_EPS: conv chains deep enough for fp32 noise
    // to dominate the quotient at 2^-10
    let eps = 4.0 * DEFAULT_EPS;
    let eval = |f: &Tensor, c: &Tensor| -> f64 {
        let mut g = Graph::new();
        let vf = g.leaf(f.clone(), false);
        let vc = g.leaf(c.clone(), false);
        let loss = build(&mut g, &[vf, vc]);
        g.value(loss).item() as f64
    };
    let check = |which: &str, base_f: &Tensor, base_c: &Tensor, grad: &Tensor, probe_f: bool| {
        let len = grad.len();
        for p in 0..8 {
            let idx = p * len / 8;
            let (mut fp, mut fm) = (base_f.clone(), base_f.clone());
            let (mut cp, mut cm) = (base_c.clone(), base_c.clone());
            if probe_f {
                fp.data_mut()[idx] += eps;
                fm.data_mut()[idx] -= eps;
            } else {
                cp.data_mut()[idx] += eps;
                cm.data_mut()[idx] -= eps;
            }
            let fd = (eval(&fp, &cp) - eval(&fm, &cm)) / (2.0 * eps as f64);
            let a = grad.data()[idx] as f64;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(0.2);
            assert!(rel < 1e-3, "{which}[{idx}]: analytic {a} vs fd {fd} (rel {rel})");
        }
    };
    check("latent", &ft, &cond, &gf, true);
    check("condition", &ft, &cond, &gc, false);
}

#[test]
fn guidance_combination_is_affine_with_exact_endpoints() {
    let e_null = randn(&latent_shape(), 15, "null");
    let e_cond = randn(&latent_shape(), 16, "cond");
    let at_one = cfg_combine(&e_null, &e_cond, 1.0);
    assert_eq!(at_one.data(), e_cond.data());
    let at_zero = cfg_combine(&e_null, &e_cond, 0.0);
    assert_eq!(at_zero.data(), e_null.data());
    let half = cfg_combine(&e_null, &e_cond, 0.5);
    let two = cfg_combine(&e_null, &e_cond, 2.0);
    for i in 0..half.len() {
        let (n, c) = (e_null.data()[i] as f64, e_cond.data()[i] as f64);
        assert!((half.data()[i] as f64 - (n + 0.5 * (c - n))).abs() < 1e-6);
        assert!((two.data()[i] as f64 - (n + 2.0 * (c - n))).abs() < 1e-5);
    }
}

#[test]
fn oracle_noise_inverts_one_step_exactly() {
    let s = NoiseSchedule::cosine(DEFAULT_STEPS);
    let f = randn(&latent_shape(), 17, "f");
    let eps = randn(&latent_shape(), 18, "eps");
    for t in [1, 57, 130, 199] {
        let ft = add_noise(&f, t, &eps, &s).unwrap();
        let back = invert_noise(&ft, t, &eps, &s).unwrap();
        let err = back.sub(&f).max_abs() as f64;
        // f_t is stored in fp32; dividing by sqrt(alpha_bar) amplifies
        // that rounding, so the tolerance scales the same way
        let tol = 2e-6 / (s.alpha_bar[t] as f64).sqrt();
        assert!(err < tol, "t={t}: max err {err} vs {tol}");
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let mut store = denoiser_store(23);
    let mut rng = stream(23, "diff.test.codec");
    init_codec(&mut store, &mut rng);
    let s = NoiseSchedule::cosine(DEFAULT_STEPS);
    let cond = ConditionFeature::new(randn(&[CONDITION_LEN, CONDITION_DIM], 19, "cond"));
    let a = sample(&store, &s, &cond, 10, 3.0, 42).unwrap();
    let b = sample(&store, &s, &cond, 10, 3.0, 42).unwrap();
    assert_eq!(a.latent.data(), b.latent.data());
    assert_eq!(a.image.data(), b.image.data());
    assert_eq!(a.image.shape(), &[3, GEN_IMAGE_SIDE, GEN_IMAGE_SIDE]);
    let c = sample(&store, &s, &cond, 10, 3.0, 43).unwrap();
    assert_ne!(a.latent.data(), c.latent.data());
}

#[test]
fn unguided_samples_ignore_the_condition() {
    let mut store = denoiser_store(24);
    let mut rng = stream(24, "diff.test.codec");
    init_codec(&mut store, &mut rng);
    let s = NoiseSchedule::cosine(DEFAULT_STEPS);
    let cond_a = ConditionFeature::new(randn(&[CONDITION_LEN, CONDITION_DIM], 20, "cond"));
    let cond_b = ConditionFeature::new(randn(&[CONDITION_LEN, CONDITION_DIM], 21, "cond"));
    let a = sample(&store, &s, &cond_a, 8, 0.0, 7).unwrap();
    let b = sample(&store, &s, &cond_b, 8, 0.0, 7).unwrap();
    assert_eq!(a.latent.data(), b.latent.data());
}

#[test]
fn sampling_rejects_null_conditions_and_negative_guidance() {
    let mut store = denoiser_store(25);
    let mut rng = stream(25, "diff.test.codec");
    init_codec(&mut store, &mut rng);
    let s = NoiseSchedule::cosine(DEFAULT_STEPS);
    assert!(sample(&store, &s, &ConditionFeature::null(), 10, 1.0, 0).is_err());
    let cond = ConditionFeature::new(randn(&[CONDITION_LEN, CONDITION_DIM], 22, "cond"));
    assert!(sample(&store, &s, &cond, 10, -0.5, 0).is_err());
    assert!(sample(&store, &s, &cond, 0, 1.0, 0).is_err());
}

#[test]
fn codec_reconstructs_held_out_renders() {
    let mut images: Vec<Tensor> = Vec::new();
    for seed in 0..10u64 {
        let scene = generate_scene(
            400 + seed,
            &SceneConfig { min_objects: 1, max_objects: 1, points_per_object: 32, ..SceneConfig::default() },
        )
        .unwrap();
        let views = render_object_views(&scene.objects[0], GEN_IMAGE_SIDE);
        images.extend(views);
    }
    assert_eq!(images.len(), 90);
    // brightness augmentation keeps dark inputs in-distribution
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
    let trace = train_codec(&mut store, &train, 300, 2e-3, 11).unwrap();
    assert!(trace.last().unwrap() < &trace[0], "loss never improved");

    let mut total = 0.0f64;
    for img in &held_out {
        let z = latent_encode(&store, img).unwrap();
        let back = latent_decode(&store, &z).unwrap();
        total += psnr(img, &back);
    }
    let mean_psnr = total / held_out.len() as f64;
    assert!(mean_psnr >= 25.0, "held-out psnr {mean_psnr:.2} dB");

    let img = &held_out[0];
    let za = latent_encode(&store, img).unwrap();
    let zb = latent_encode(&store, img).unwrap();
    assert_eq!(za.data(), zb.data());
    assert_eq!(za.shape(), latent_shape().as_slice());

    let black = Tensor::zeros(&[3, GEN_IMAGE_SIDE, GEN_IMAGE_SIDE]);
    let zb = latent_encode(&store, &black).unwrap();
    assert!(zb.all_finite());
    let back = latent_decode(&store, &zb).unwrap();
    let mean = back.data().iter().map(|&v| v as f64).sum::<f64>() / back.len() as f64;
    assert!(mean < 0.1, "black image decodes to mean {mean}");

    let wrong = Tensor::zeros(&[3, 32, 32]);
    assert!(latent_encode(&store, &wrong).is_err());
    let _ = ring_poses(1.0, 64);
}
