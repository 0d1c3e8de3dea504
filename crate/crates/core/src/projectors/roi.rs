//! Region-of-interest extraction: a ground-truth oracle detector with an
//! optional jitter mode, and seeded point sampling inside a box.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::rng::{next_normal, next_uniform, split_seed, stream};
use crate::synthdata::scene::{Box3, Scene};

pub const CONFIDENCE_THRESHOLD: f32 = 0.3;

#[derive(Clone, Copy, Debug)]
pub struct RoiDetection {
    pub boxv: Box3,
    pub confidence: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DetectMode {
    Oracle,
    /// center/extent noise scale in world units; confidence drawn from
    /// Uniform(1 - 2*sigma, 1) so sigma=0 degenerates to the oracle
    Jittered { sigma: f32 },
}

/// Detections below the 0.3 confidence threshold are dropped.
pub fn detect_rois(scene: &Scene, mode: DetectMode, seed: u64) -> Vec<RoiDetection> {
    let mut out = Vec::new();
    match mode {
        DetectMode::Oracle => {
            for o in &scene.objects {
                out.push(RoiDetection { boxv: o.boxv, confidence: 1.0 });
            }
        }
        DetectMode::Jittered { sigma } => {
            let mut rng = stream(seed, "roi.jitter");
            for o in &scene.objects {
                let mut center = o.boxv.center;
                let mut half = o.boxv.half;
                for i in 0..3 {
                    center[i] += sigma * next_normal(&mut rng);
                }
                for i in 0..3 {
                    half[i] = (half[i] * (1.0 + sigma * next_normal(&mut rng))).max(0.05);
                }
                let confidence = next_uniform(&mut rng, (1.0 - 2.0 * sigma).max(0.0), 1.0);
                if confidence > CONFIDENCE_THRESHOLD {
                    out.push(RoiDetection { boxv: Box3 { center, half }, confidence });
                }
            }
        }
    }
    out
}

/// Samples n points from inside the box, without replacement when enough
/// points are available, then normalizes into the ROI frame: xyz mapped to
/// [-1, 1] per axis, rgb untouched.
pub fn sample_roi_points(points: &Tensor, boxv: &Box3, n: usize, seed: u64) -> Result<Tensor> {
    let shape = points.shape();
    if shape.len() != 2 || shape[1] != 6 {
        return Err(Error::ShapeMismatch(format!(
            "expected m x 6 point rows, got {shape:?}"
        )));
    }
    let data = points.data();
    let inside: Vec<usize> = (0..shape[0])
        .filter(|i| {
            let p = &data[i * 6..i * 6 + 3];
            boxv.contains([p[0], p[1], p[2]], 0.0)
        })
        .collect();
    if inside.is_empty() {
        return Err(Error::EmptyRoi);
    }
    let mut rng = stream(split_seed(seed, "roi.sample"), "roi.sample");
    let chosen: Vec<usize> = if inside.len() >= n {
        // partial Fisher-Yates: first n of a seeded shuffle
        let mut pool = inside;
        for i in 0..n {
            let j = i + (next_uniform(&mut rng, 0.0, (pool.len() - i) as f32) as usize)
                .min(pool.len() - i - 1);
            pool.swap(i, j);
        }
        pool.truncate(n);
        pool
    } else {
        (0..n)
            .map(|_| {
                inside[(next_uniform(&mut rng, 0.0, inside.len() as f32) as usize)
                    .min(inside.len() - 1)]
            })
            .collect()
    };
    let mut out = Vec::with_capacity(n * 6);
    for &i in &chosen {
        let row = &data[i * 6..(i + 1) * 6];
        for a in 0..3 {
            let v = (row[a] - boxv.center[a]) / boxv.half[a].max(1e-6);
            out.push(v.clamp(-1.0, 1.0));
        }
        out.extend_from_slice(&row[3..6]);
    }
    Ok(Tensor::from_vec(vec![n, 6], out))
}
