//! Analytic ray-cast renderer for capsule-and-sphere scenes.
//!
//! Depth panels cast one ray through each pixel center and record the
//! Euclidean distance to the nearest surface, with 0 marking background, so
//! a mask derived as depth > 0 matches the depth panel exactly. Color panels
//! supersample a fixed subgrid per pixel and average flat-shaded hits over
//! the background color.
//!
//! Markers are painted onto their own limb: where a ray hits both a marker
//! and the capsule it covers, the marker wins regardless of depth order, so
//! a marker silhouette is only ever cut by other geometry.

use super::body::{has_marker, Body, MARKER_EXTRA_RADIUS};
use super::camera::Camera;
use super::color;
use super::geom::{ray_capsule, ray_sphere, Capsule, Sphere, Vec3};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub enum Shape {
    Capsule(Capsule),
    Sphere(Sphere),
}

#[derive(Debug, Clone, Copy)]
pub struct SceneItem {
    pub shape: Shape,
    pub rgb: [f32; 3],
    /// index of a scene item this one is painted over: wherever a ray hits
    /// both, this item shows in front of the covered one
    pub covers: Option<usize>,
}

/// Scene for a posed body: hued capsules, one marker sphere at the midpoint
/// of each marked segment wearing that segment's hue slot, and the optional
/// accessory.
pub fn body_scene(body: &Body, appearance: &super::body::Appearance) -> Vec<SceneItem> {
    let mut scene = Vec::with_capacity(2 * body.capsules.len() + 1);
    for cap in &body.capsules {
        scene.push(SceneItem {
            shape: Shape::Capsule(*cap),
            rgb: color::body_color(appearance.hue),
            covers: None,
        });
    }
    for (seg, cap) in body.capsules.iter().enumerate() {
        if !has_marker(seg) {
            continue;
        }
        let marker = Sphere { c: cap.midpoint(), r: cap.r + MARKER_EXTRA_RADIUS };
        scene.push(SceneItem {
            shape: Shape::Sphere(marker),
            rgb: color::segment_color(appearance.hue, seg),
            covers: Some(seg),
        });
    }
    if appearance.accessory {
        scene.push(SceneItem {
            shape: Shape::Sphere(body.accessory),
            rgb: color::ACCESSORY_COLOR,
            covers: None,
        });
    }
    scene
}

fn nearest_hit(origin: Vec3, dir: Vec3, scene: &[SceneItem]) -> Option<(f64, usize)> {
    debug_assert!(scene.len() <= 64);
    let mut ts = [f64::INFINITY; 64];
    let mut covered = 0u64;
    for (idx, item) in scene.iter().enumerate() {
        let t = match item.shape {
            Shape::Capsule(c) => ray_capsule(origin, dir, &c),
            Shape::Sphere(s) => ray_sphere(origin, dir, &s),
        };
        if let Some(t) = t {
            ts[idx] = t;
            if let Some(k) = item.covers {
                covered |= 1 << k;
            }
        }
    }
    let mut best: Option<(f64, usize)> = None;
    for (idx, &t) in ts.iter().enumerate().take(scene.len()) {
        if t.is_finite()
            && covered & (1 << idx) == 0
            && best.is_none_or(|(b, _)| t < b)
        {
            best = Some((t, idx));
        }
    }
    best
}

/// Raw Euclidean hit distances through pixel centers; misses give 0.
pub fn render_depth(scene: &[SceneItem], cam: &Camera) -> Tensor {
    let (w, h) = (cam.width, cam.height);
    let mut data = vec![0.0f32; w * h];
    for j in 0..h {
        for i in 0..w {
            let dir = cam.pixel_ray(i as f64 + 0.5, j as f64 + 0.5);
            if let Some((t, _)) = nearest_hit(cam.pos, dir, scene) {
                data[j * w + i] = t as f32;
            }
        }
    }
    Tensor::new(data, vec![1, h, w])
}

pub const SUPERSAMPLE: usize = 4;

/// Flat-shaded color panel in [0,1], supersampled on an n x n subgrid.
pub fn render_color(scene: &[SceneItem], background: [f32; 3], cam: &Camera, ss: usize) -> Tensor {
    assert!(ss >= 1);
    let (w, h) = (cam.width, cam.height);
    let mut data = vec![0.0f32; 3 * w * h];
    let inv = 1.0 / (ss * ss) as f32;
    for j in 0..h {
        for i in 0..w {
            let mut acc = [0.0f32; 3];
            for sj in 0..ss {
                for si in 0..ss {
                    let u = i as f64 + (si as f64 + 0.5) / ss as f64;
                    let v = j as f64 + (sj as f64 + 0.5) / ss as f64;
                    let rgb = match nearest_hit(cam.pos, cam.pixel_ray(u, v), scene) {
                        Some((_, idx)) => scene[idx].rgb,
                        None => background,
                    };
                    for c in 0..3 {
                        acc[c] += rgb[c];
                    }
                }
            }
            for c in 0..3 {
                data[c * w * h + j * w + i] = acc[c] * inv;
            }
        }
    }
    Tensor::new(data, vec![3, h, w])
}
