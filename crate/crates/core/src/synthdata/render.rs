//! Flat-shaded analytic ray tracer for the four primitive shapes.
//!
//! The light rides on the camera (l = -ray direction), so a sphere looks the
//! same from every ring azimuth and a cube repeats every 90 degrees.

use serde::{Deserialize, Serialize};

use crate::numerics::tensor::Tensor;
use crate::synthdata::scene::{Box3, Scene, SceneObject, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth_deg: f32,
    pub elevation_deg: f32,
    pub radius: f32,
    pub fov_deg: f32,
    pub resolution: usize,
}

/// Eight ring views at 45-degree steps plus one top view.
pub fn ring_poses(radius: f32, resolution: usize) -> Vec<CameraPose> {
    let mut poses: Vec<CameraPose> = (0..8)
        .map(|k| CameraPose {
            azimuth_deg: 45.0 * k as f32,
            elevation_deg: 30.0,
            radius,
            fov_deg: 40.0,
            resolution,
        })
        .collect();
    poses.push(CameraPose {
        azimuth_deg: 0.0,
        elevation_deg: 90.0,
        radius,
        fov_deg: 40.0,
        resolution,
    });
    poses
}

pub fn view_radius(boxv: &Box3) -> f32 {
    3.5 * boxv.half.iter().cloned().fold(0.0f32, f32::max)
}

#[derive(Clone, Copy)]
struct Ray {
    o: [f32; 3],
    d: [f32; 3],
}

fn sub(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: [f32; 3], b: [f32; 3]) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f32; 3]) -> [f32; 3] {
    let n = dot3(a, a).sqrt().max(1e-12);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Camera center for a pose orbiting `target`.
pub fn camera_position(pose: &CameraPose, target: [f32; 3]) -> [f32; 3] {
    let az = pose.azimuth_deg.to_radians();
    let el = pose.elevation_deg.to_radians();
    [
        target[0] + pose.radius * el.cos() * az.cos(),
        target[1] + pose.radius * el.cos() * az.sin(),
        target[2] + pose.radius * el.sin(),
    ]
}

/// Orthonormal camera frame (right, up, forward). Straight-down poses use
/// +x as the up reference so the frame stays well defined.
pub fn camera_frame(pose: &CameraPose, target: [f32; 3]) -> ([f32; 3], [f32; 3], [f32; 3]) {
    let pos = camera_position(pose, target);
    let forward = normalize(sub(target, pos));
    let up_ref = if pose.elevation_deg >= 89.0 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let right = normalize(cross(forward, up_ref));
    let up = cross(right, forward);
    (right, up, forward)
}

fn pixel_ray(pose: &CameraPose, target: [f32; 3], px: usize, py: usize) -> Ray {
    let pos = camera_position(pose, target);
    let (right, up, forward) = camera_frame(pose, target);
    let res = pose.resolution as f32;
    let t = (pose.fov_deg.to_radians() / 2.0).tan();
    let ndc_x = ((px as f32 + 0.5) / res * 2.0 - 1.0) * t;
    let ndc_y = (1.0 - (py as f32 + 0.5) / res * 2.0) * t;
    let d = [
        forward[0] + ndc_x * right[0] + ndc_y * up[0],
        forward[1] + ndc_x * right[1] + ndc_y * up[1],
        forward[2] + ndc_x * right[2] + ndc_y * up[2],
    ];
    Ray { o: pos, d: normalize(d) }
}

/// Nearest hit distance and outward surface normal, if any.
fn intersect(ray: &Ray, obj: &SceneObject) -> Option<(f32, [f32; 3])> {
    let c = obj.boxv.center;
    let h = obj.boxv.half;
    let o = sub(ray.o, c);
    let d = ray.d;
    match obj.shape {
        Shape::Sphere => {
            let r = h[0];
            let b = dot3(o, d);
            let disc = b * b - (dot3(o, o) - r * r);
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            if t <= 1e-4 {
                return None;
            }
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            Some((t, normalize(p)))
        }
        Shape::Cube => {
            let mut t_enter = f32::NEG_INFINITY;
            let mut t_exit = f32::INFINITY;
            let mut axis = 0usize;
            for i in 0..3 {
                if d[i].abs() < 1e-9 {
                    if o[i].abs() > h[i] {
                        return None;
                    }
                    continue;
                }
                let mut t0 = (-h[i] - o[i]) / d[i];
                let mut t1 = (h[i] - o[i]) / d[i];
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_enter {
                    t_enter = t0;
                    axis = i;
                }
                t_exit = t_exit.min(t1);
            }
            if t_enter > t_exit || t_enter <= 1e-4 {
                return None;
            }
            let mut n = [0.0f32; 3];
            n[axis] = if o[axis] + t_enter * d[axis] > 0.0 { 1.0 } else { -1.0 };
            Some((t_enter, n))
        }
        Shape::Cylinder => {
            let r = h[0];
            let hz = h[2];
            let mut best: Option<(f32, [f32; 3])> = None;
            let a = d[0] * d[0] + d[1] * d[1];
            if a > 1e-12 {
                let b = o[0] * d[0] + o[1] * d[1];
                let cq = o[0] * o[0] + o[1] * o[1] - r * r;
                let disc = b * b - a * cq;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / a;
                    if t > 1e-4 {
                        let z = o[2] + t * d[2];
                        if z.abs() <= hz {
                            let p = [o[0] + t * d[0], o[1] + t * d[1], 0.0];
                            best = Some((t, normalize(p)));
                        }
                    }
                }
            }
            for sign in [1.0f32, -1.0] {
                if d[2].abs() < 1e-9 {
                    continue;
                }
                let t = (sign * hz - o[2]) / d[2];
                if t > 1e-4 && best.map_or(true, |(bt, _)| t < bt) {
                    let x = o[0] + t * d[0];
                    let y = o[1] + t * d[1];
                    if x * x + y * y <= r * r {
                        best = Some((t, [0.0, 0.0, sign]));
                    }
                }
            }
            best
        }
        Shape::Cone => {
            let r = h[0];
            let hz = h[2];
            let k = r / (2.0 * hz);
            let k2 = k * k;
            // work relative to the apex at local +hz
            let oz = o[2] - hz;
            let mut best: Option<(f32, [f32; 3])> = None;
            let a = d[0] * d[0] + d[1] * d[1] - k2 * d[2] * d[2];
            let b = o[0] * d[0] + o[1] * d[1] - k2 * oz * d[2];
            let cq = o[0] * o[0] + o[1] * o[1] - k2 * oz * oz;
            if a.abs() > 1e-12 {
                let disc = b * b - a * cq;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    for t in [(-b - sq) / a, (-b + sq) / a] {
                        if t > 1e-4 && best.map_or(true, |(bt, _)| t < bt) {
                            let z = o[2] + t * d[2];
                            if z >= -hz && z <= hz {
                                let p = [o[0] + t * d[0], o[1] + t * d[1], z - hz];
                                let n = normalize([p[0], p[1], -k2 * p[2]]);
                                best = Some((t, n));
                            }
                        }
                    }
                }
            }
            if d[2].abs() > 1e-9 {
                let t = (-hz - o[2]) / d[2];
                if t > 1e-4 && best.map_or(true, |(bt, _)| t < bt) {
                    let x = o[0] + t * d[0];
                    let y = o[1] + t * d[1];
                    if x * x + y * y <= r * r {
                        best = Some((t, [0.0, 0.0, -1.0]));
                    }
                }
            }
            best
        }
    }
}

fn shade(rgb: [f32; 3], normal: [f32; 3], ray_dir: [f32; 3]) -> [f32; 3] {
    let lambert = 0.35 + 0.65 * (-dot3(normal, ray_dir)).max(0.0);
    [rgb[0] * lambert, rgb[1] * lambert, rgb[2] * lambert]
}

fn put_pixel(img: &mut [f32], res: usize, px: usize, py: usize, c: [f32; 3]) {
    for ch in 0..3 {
        img[ch * res * res + py * res + px] = c[ch];
    }
}

/// Perspective render of a single object centered in frame, white background.
pub fn render_object_view(obj: &SceneObject, pose: &CameraPose) -> Tensor {
    let res = pose.resolution;
    let mut img = vec![1.0f32; 3 * res * res];
    let target = obj.boxv.center;
    for py in 0..res {
        for px in 0..res {
            let ray = pixel_ray(pose, target, px, py);
            if let Some((_, n)) = intersect(&ray, obj) {
                put_pixel(&mut img, res, px, py, shade(obj.rgb, n, ray.d));
            }
        }
    }
    Tensor::from_vec(vec![3, res, res], img)
}

/// Ring + top views at 3.5x the object's largest half-extent.
pub fn render_object_views(obj: &SceneObject, resolution: usize) -> Vec<Tensor> {
    ring_poses(view_radius(&obj.boxv), resolution)
        .iter()
        .map(|p| render_object_view(obj, p))
        .collect()
}

/// Map a world xy position to continuous topdown pixel coordinates.
pub fn topdown_pixel(floor_extent: f32, xy: [f32; 2], resolution: usize) -> (f32, f32) {
    let e = floor_extent;
    let res = resolution as f32;
    let px = (xy[0] + e / 2.0) / e * res - 0.5;
    let py = (e / 2.0 - xy[1]) / e * res - 0.5;
    (px, py)
}

/// Orthographic straight-down render of the whole scene on white.
pub fn render_topdown(scene: &Scene, resolution: usize) -> Tensor {
    let res = resolution;
    let e = scene.floor_extent;
    let mut img = vec![1.0f32; 3 * res * res];
    let z_high = 10.0;
    for py in 0..res {
        let wy = e / 2.0 - (py as f32 + 0.5) / res as f32 * e;
        for px in 0..res {
            let wx = (px as f32 + 0.5) / res as f32 * e - e / 2.0;
            let ray = Ray { o: [wx, wy, z_high], d: [0.0, 0.0, -1.0] };
            let mut best: Option<(f32, [f32; 3], [f32; 3])> = None;
            for obj in &scene.objects {
                if let Some((t, n)) = intersect(&ray, obj) {
                    if best.map_or(true, |(bt, _, _)| t < bt) {
                        best = Some((t, n, obj.rgb));
                    }
                }
            }
            if let Some((_, n, rgb)) = best {
                put_pixel(&mut img, res, px, py, shade(rgb, n, ray.d));
            }
        }
    }
    Tensor::from_vec(vec![3, res, res], img)
}

/// Fraction of pixels that differ between two equally sized images.
pub fn pixel_diff_fraction(a: &Tensor, b: &Tensor, tol: f32) -> f32 {
    assert_eq!(a.shape(), b.shape());
    let (pa, pb) = (a.data(), b.data());
    let n = pa.len() / 3;
    let mut differing = 0usize;
    for i in 0..n {
        let d = (0..3)
            .map(|c| (pa[c * n + i] - pb[c * n + i]).abs())
            .fold(0.0f32, f32::max);
        if d > tol {
            differing += 1;
        }
    }
    differing as f32 / n as f32
}
