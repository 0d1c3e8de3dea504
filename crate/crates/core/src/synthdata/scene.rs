//! Procedural scenes: colored primitive objects on a square floor, with
//! surface point clouds. Everything is a pure function of (seed, config).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::rng::{next_uniform, stream, SeedRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Sphere,
    Cone,
    Cylinder,
}

pub const SHAPES: [Shape; 4] = [Shape::Cube, Shape::Sphere, Shape::Cone, Shape::Cylinder];

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Sphere => "sphere",
            Shape::Cone => "cone",
            Shape::Cylinder => "cylinder",
        }
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        SHAPES.iter().copied().find(|s| s.name() == name)
    }
}

/// Named hue table. Shading scales all channels equally, so rendered hue
/// angles stay exact and at least 28 degrees apart.
pub const HUES: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("orange", [0.95, 0.55, 0.1]),
    ("yellow", [0.9, 0.9, 0.1]),
    ("green", [0.1, 0.8, 0.15]),
    ("cyan", [0.1, 0.8, 0.85]),
    ("blue", [0.15, 0.2, 0.9]),
    ("purple", [0.6, 0.15, 0.8]),
    ("magenta", [0.9, 0.15, 0.75]),
];

pub fn hue_rgb(name: &str) -> Option<[f32; 3]> {
    HUES.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f32; 3],
    pub half: [f32; 3],
}

impl Box3 {
    pub fn min(&self) -> [f32; 3] {
        [
            self.center[0] - self.half[0],
            self.center[1] - self.half[1],
            self.center[2] - self.half[2],
        ]
    }

    pub fn max(&self) -> [f32; 3] {
        [
            self.center[0] + self.half[0],
            self.center[1] + self.half[1],
            self.center[2] + self.half[2],
        ]
    }

    pub fn overlaps(&self, other: &Box3, gap: f32) -> bool {
        (0..3).all(|i| {
            (self.center[i] - other.center[i]).abs() < self.half[i] + other.half[i] + gap
        })
    }

    pub fn contains(&self, p: [f32; 3], slack: f32) -> bool {
        (0..3).all(|i| (p[i] - self.center[i]).abs() <= self.half[i] * (1.0 + slack) + 1e-6)
    }

    pub fn volume(&self) -> f32 {
        8.0 * self.half[0] * self.half[1] * self.half[2]
    }
}

/// Intersection-over-union of two axis-aligned boxes.
pub fn box_iou(a: &Box3, b: &Box3) -> f32 {
    let mut inter = 1.0f32;
    for i in 0..3 {
        let lo = (a.center[i] - a.half[i]).max(b.center[i] - b.half[i]);
        let hi = (a.center[i] + a.half[i]).min(b.center[i] + b.half[i]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    inter / (a.volume() + b.volume() - inter)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub hue: String,
    pub rgb: [f32; 3],
    pub boxv: Box3,
    /// n x 6 rows of xyz + rgb sampled on the surface.
    #[serde(skip)]
    pub points: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub floor_extent: f32,
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub floor_extent: f32,
    /// radius-like half-extent range
    pub size_min: f32,
    pub size_max: f32,
    pub points_per_object: usize,
    /// objects in one scene get distinct (hue, shape) pairs
    pub unique_attributes: bool,
}

impl Default for SceneConfig {
    fn default() -> SceneConfig {
        SceneConfig {
            min_objects: 1,
            max_objects: 2,
            floor_extent: 6.0,
            size_min: 0.35,
            size_max: 0.8,
            points_per_object: 2048,
            unique_attributes: true,
        }
    }
}

fn pick(rng: &mut SeedRng, n: usize) -> usize {
    (next_uniform(rng, 0.0, n as f32) as usize).min(n - 1)
}

/// Rejection-samples non-overlapping objects. Deterministic per seed.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    if config.min_objects < 1
        || config.max_objects > 8
        || config.min_objects > config.max_objects
        || config.size_min <= 0.0
        || config.size_min > config.size_max
        || config.floor_extent < 4.0 * config.size_max
    {
        return Err(Error::Config(format!("scene bounds invalid: {config:?}")));
    }
    let mut rng = stream(seed, "scene.layout");
    let n = config.min_objects + pick(&mut rng, config.max_objects - config.min_objects + 1);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    let budget = 64 * n;
    let mut attempts = 0;
    while objects.len() < n {
        if attempts >= budget {
            return Err(Error::Placement(attempts));
        }
        attempts += 1;
        let shape = SHAPES[pick(&mut rng, 4)];
        let (hue, rgb) = HUES[pick(&mut rng, 8)];
        if config.unique_attributes
            && objects.iter().any(|o| o.shape == shape && o.hue == hue)
        {
            continue;
        }
        let r = next_uniform(&mut rng, config.size_min, config.size_max);
        let h = next_uniform(&mut rng, config.size_min, config.size_max);
        let half = match shape {
            Shape::Cube | Shape::Sphere => [r, r, r],
            Shape::Cone | Shape::Cylinder => [r, r, h],
        };
        let lim = config.floor_extent / 2.0 - half[0].max(half[1]) - 0.1;
        let cx = next_uniform(&mut rng, -lim, lim);
        let cy = next_uniform(&mut rng, -lim, lim);
        let boxv = Box3 { center: [cx, cy, half[2]], half };
        if objects.iter().any(|o| o.boxv.overlaps(&boxv, 0.05)) {
            continue;
        }
        objects.push(SceneObject {
            shape,
            hue: hue.to_string(),
            rgb,
            boxv,
            points: Tensor::zeros(&[0, 6]),
        });
    }
    let mut scene = Scene {
        id: format!("scene_{seed:08x}"),
        seed,
        floor_extent: config.floor_extent,
        objects,
    };
    for i in 0..scene.objects.len() {
        let mut prng = stream(seed, &format!("scene.points.{i}"));
        let o = &scene.objects[i];
        let pts = sample_surface(o.shape, &o.boxv, o.rgb, config.points_per_object, &mut prng);
        scene.objects[i].points = pts;
    }
    Ok(scene)
}

/// Area-weighted surface samples, colored with the object's base RGB.
pub fn sample_surface(
    shape: Shape,
    boxv: &Box3,
    rgb: [f32; 3],
    n: usize,
    rng: &mut SeedRng,
) -> Tensor {
    let mut data = Vec::with_capacity(n * 6);
    let c = boxv.center;
    let h = boxv.half;
    for _ in 0..n {
        let p = match shape {
            Shape::Cube => cube_point(h, rng),
            Shape::Sphere => sphere_point(h[0], rng),
            Shape::Cone => cone_point(h[0], h[2], rng),
            Shape::Cylinder => cylinder_point(h[0], h[2], rng),
        };
        data.extend_from_slice(&[p[0] + c[0], p[1] + c[1], p[2] + c[2], rgb[0], rgb[1], rgb[2]]);
    }
    Tensor::from_vec(vec![n, 6], data)
}

fn cube_point(h: [f32; 3], rng: &mut SeedRng) -> [f32; 3] {
    // area-weighted face choice for the general box
    let (ax, ay, az) = (h[1] * h[2], h[0] * h[2], h[0] * h[1]);
    let total = 2.0 * (ax + ay + az);
    let mut t = next_uniform(rng, 0.0, total);
    let u = next_uniform(rng, -1.0, 1.0);
    let v = next_uniform(rng, -1.0, 1.0);
    for (axis, area) in [(0usize, ax), (1, ay), (2, az)] {
        if t < 2.0 * area {
            let sign = if t < area { 1.0 } else { -1.0 };
            let mut p = [0.0f32; 3];
            p[axis] = sign * h[axis];
            let others: [usize; 2] = match axis {
                0 => [1, 2],
                1 => [0, 2],
                _ => [0, 1],
            };
            p[others[0]] = u * h[others[0]];
            p[others[1]] = v * h[others[1]];
            return p;
        }
        t -= 2.0 * area;
    }
    [h[0], u * h[1], v * h[2]]
}

fn sphere_point(r: f32, rng: &mut SeedRng) -> [f32; 3] {
    // uniform via normalized gaussian
    let mut v = [0.0f32; 3];
    loop {
        for x in &mut v {
            *x = crate::rng::next_normal(rng);
        }
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-6 {
            return [v[0] / norm * r, v[1] / norm * r, v[2] / norm * r];
        }
    }
}

fn cone_point(r: f32, hz: f32, rng: &mut SeedRng) -> [f32; 3] {
    // base disc z=-hz, apex at +hz; lateral area pi*r*slant, base pi*r^2
    let slant = (r * r + 4.0 * hz * hz).sqrt();
    let lateral = r * slant;
    let base = r * r;
    let pick_lateral = next_uniform(rng, 0.0, lateral + base) < lateral;
    let theta = next_uniform(rng, 0.0, std::f32::consts::TAU);
    if pick_lateral {
        // radius density linear toward the base
        let t = next_uniform(rng, 0.0, 1.0).sqrt();
        let rr = t * r;
        let z = hz - 2.0 * hz * t;
        [rr * theta.cos(), rr * theta.sin(), z]
    } else {
        let rr = r * next_uniform(rng, 0.0, 1.0).sqrt();
        [rr * theta.cos(), rr * theta.sin(), -hz]
    }
}

fn cylinder_point(r: f32, hz: f32, rng: &mut SeedRng) -> [f32; 3] {
    let lateral = 2.0 * r * (2.0 * hz);
    let caps = 2.0 * r * r;
    let theta = next_uniform(rng, 0.0, std::f32::consts::TAU);
    if next_uniform(rng, 0.0, lateral + caps) < lateral {
        let z = next_uniform(rng, -hz, hz);
        [r * theta.cos(), r * theta.sin(), z]
    } else {
        let rr = r * next_uniform(rng, 0.0, 1.0).sqrt();
        let z = if next_uniform(rng, 0.0, 1.0) < 0.5 { hz } else { -hz };
        [rr * theta.cos(), rr * theta.sin(), z]
    }
}
