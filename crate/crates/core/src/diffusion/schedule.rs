//! Cosine noise schedule and the closed-form forward noising process.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 200;
const ALPHA_FLOOR: f32 = 1e-5;

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    /// cumulative signal fraction per step, index 0..=T, alpha_bar[0] = 1
    pub alpha_bar: Vec<f32>,
}

impl NoiseSchedule {
    pub fn cosine(t_steps: usize) -> NoiseSchedule {
        assert!(t_steps >= 1);
        let s = 0.008f64;
        let f = |t: f64| {
            let x = ((t / t_steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
            x.cos() * x.cos()
        };
        let f0 = f(0.0);
        let alpha_bar = (0..=t_steps)
            .map(|t| {
                if t == 0 {
                    1.0
                } else {
                    ((f(t as f64) / f0) as f32).clamp(ALPHA_FLOOR, 1.0)
                }
            })
            .collect();
        NoiseSchedule { alpha_bar }
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f32> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidValue(format!("step {t} beyond schedule {}", self.t_max())))
    }
}

/// f_t = sqrt(abar_t) f + sqrt(1 - abar_t) eps.
pub fn add_noise(f: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if f.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "noise shape {:?} vs latent {:?}",
            eps.shape(),
            f.shape()
        )));
    }
    let ab = schedule.alpha_bar_at(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = f.clone();
    for (o, (&x, &e)) in out.data_mut().iter_mut().zip(f.data().iter().zip(eps.data())) {
        *o = sa * x + sn * e;
    }
    Ok(out)
}

/// Closed-form inversion: recover f from f_t when the true eps is known.
pub fn invert_noise(
    f_t: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar_at(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = f_t.clone();
    for (o, (&xt, &e)) in out.data_mut().iter_mut().zip(f_t.data().iter().zip(eps.data())) {
        *o = (xt - sn * e) / sa;
    }
    Ok(out)
}
