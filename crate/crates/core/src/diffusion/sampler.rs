//! Ancestral sampler with classifier-free guidance. The null feature is
//! the negative prompt; guidance endpoints are exact by construction.

use crate::error::{Error, Result};
use crate::genmap::ConditionFeature;
use crate::numerics::tensor::Tensor;
use crate::numerics::ParamStore;
use crate::rng::{next_normal, stream};

use super::codec::{latent_decode, LATENT_CHANNELS, LATENT_SIDE};
use super::denoiser::predict_noise_t;
use super::schedule::NoiseSchedule;

pub const DEFAULT_SAMPLE_STEPS: usize = 50;

/// eps_hat = eps_null + s (eps_cond - eps_null), with exact endpoints.
pub fn cfg_combine(eps_null: &Tensor, eps_cond: &Tensor, s: f32) -> Tensor {
    if s == 1.0 {
        return eps_cond.clone();
    }
    if s == 0.0 {
        return eps_null.clone();
    }
    eps_null.zip_map(eps_cond, |n, c| n + s * (c - n))
}

/// Evenly spaced descending step plan from T to 0, steps+1 entries.
fn step_plan(t_max: usize, steps: usize) -> Vec<usize> {
    (0..=steps).map(|i| i * t_max / steps).collect()
}

pub struct SampleOutput {
    pub image: Tensor,
    pub latent: Tensor,
}

/// Draw one latent from pure noise under the condition and decode it.
/// Deterministic per seed.
pub fn sample(
    store: &ParamStore,
    schedule: &NoiseSchedule,
    cond: &ConditionFeature,
    steps: usize,
    guidance: f32,
    seed: u64,
) -> Result<SampleOutput> {
    if cond.is_null {
        return Err(Error::InvalidValue(
            "sampling needs a non-null condition".into(),
        ));
    }
    if guidance < 0.0 {
        return Err(Error::InvalidValue(format!(
            "guidance scale {guidance} must be nonnegative"
        )));
    }
    if steps == 0 || steps > schedule.t_max() {
        return Err(Error::InvalidValue(format!(
            "sample steps {steps} outside 1..={}",
            schedule.t_max()
        )));
    }
    let null = ConditionFeature::null();
    let mut rng = stream(seed, "diffusion.sample");
    let mut x = Tensor::zeros(&[LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE]);
    for v in x.data_mut() {
        *v = next_normal(&mut rng);
    }
    let plan = step_plan(schedule.t_max(), steps);
    for k in (1..=steps).rev() {
        let t = plan[k];
        let t_prev = plan[k - 1];
        let eps_hat = if guidance == 0.0 {
            predict_noise_t(store, &x, t, &null.values)?
        } else if guidance == 1.0 {
            predict_noise_t(store, &x, t, &cond.values)?
        } else {
            let e_null = predict_noise_t(store, &x, t, &null.values)?;
            let e_cond = predict_noise_t(store, &x, t, &cond.values)?;
            cfg_combine(&e_null, &e_cond, guidance)
        };
        let ab_t = schedule.alpha_bar_at(t)?;
        let ab_p = schedule.alpha_bar_at(t_prev)?;
        let (sa_t, sn_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let x0 = x.zip_map(&eps_hat, |xt, e| (xt - sn_t * e) / sa_t);
        if t_prev == 0 {
            x = x0;
            continue;
        }
        let var = ((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)).max(0.0);
        let sigma = var.sqrt();
        let dir = (1.0 - ab_p - var).max(0.0).sqrt();
        let mut next = x0.scale(ab_p.sqrt());
        for (n, &e) in next.data_mut().iter_mut().zip(eps_hat.data()) {
            *n += dir * e + sigma * next_normal(&mut rng);
        }
        x = next;
    }
    let image = latent_decode(store, &x)?;
    Ok(SampleOutput { image, latent: x })
}
