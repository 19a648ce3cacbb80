//! Toy per-panel detector: hue-slot landmark centroids plus attribute cues.
//!
//! Saturated pixels vote for a hue bucket; within the majority bucket, each
//! pixel close enough to a marked segment's hue slot contributes to that
//! segment's centroid, weighted by chroma. Chroma equals the foreground
//! coverage for marker-over-gray mixes, so anti-aliased edges pull centroids
//! by exactly their covered fraction. Edges between a marker and the capsule
//! body mix hues across intermediate slots, so each slot's centroid is
//! refined on a local window around its coarse estimate, which rejects that
//! far-away contamination. Each landmark also reports its blob mass and a
//! disk-shape ratio (1 for a filled disk), letting callers drop partially
//! occluded markers. Unsaturated pixels split into a dark accessory blob and
//! the background estimate, with the background level taken as the median
//! unsaturated value.

use super::super::sim::color;
use crate::sim::body::{has_marker, ACCESSORY_RADIUS};
use crate::sim::camera::RING_RADIUS;
use crate::tensor::Tensor;

pub const SAT_GATE: f64 = 0.25;
pub const VAL_GATE: f64 = 0.12;
pub const SLOT_GATE: f64 = 0.35;
pub const MIN_COVERAGE: f64 = 0.5;
/// shrinking local windows: (multiple of the blob's mass radius, padding px)
const REFINE_SCHEDULE: [(f64, f64); 3] = [(3.0, 1.5), (2.0, 1.0), (1.7, 0.5)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedLandmark {
    pub segment: usize,
    pub u: f64,
    pub v: f64,
    /// chroma-weighted pixel mass of the marker blob
    pub coverage: f64,
    /// second moment over the moment of a filled disk of equal mass
    pub spread: f64,
}

#[derive(Debug, Clone)]
pub struct PanelDetection {
    /// at most one entry per marked segment
    pub landmarks: Vec<DetectedLandmark>,
    /// majority hue bucket of saturated pixels, if any
    pub hue_class: Option<usize>,
    /// mean color of unsaturated pixels near the median brightness
    pub background: [f64; 3],
    pub accessory: bool,
    pub foreground_pixels: usize,
}

/// Dark coverage must reach this fraction of the accessory's expected
/// projected disk area before the accessory counts as present.
pub const ACCESSORY_AREA_GATE: f64 = 0.5;

fn accessory_expected_area(side: usize) -> f64 {
    use std::sync::OnceLock;
    static DIST: OnceLock<f64> = OnceLock::new();
    let d = *DIST.get_or_init(|| {
        let body = crate::sim::fk(&crate::sim::BodyPose::neutral()).expect("neutral pose");
        let target = crate::sim::body::canonical_centroid();
        let dy = body.accessory.c[1] - target[1];
        (RING_RADIUS * RING_RADIUS + dy * dy).sqrt()
    });
    let r = 2.0 * side as f64 * ACCESSORY_RADIUS / d;
    std::f64::consts::PI * r * r
}

/// Run the detector on one [3,H,W] panel with values in [0,1].
pub fn detect_panel(panel: &Tensor) -> PanelDetection {
    assert_eq!(panel.shape.len(), 3);
    assert_eq!(panel.shape[0], 3);
    let (h, w) = (panel.shape[1], panel.shape[2]);
    let n = h * w;

    let mut bucket_votes = [0usize; color::HUE_CLASSES];
    let mut fg = Vec::new();
    let mut rest = Vec::new();
    for j in 0..h {
        for i in 0..w {
            let idx = j * w + i;
            let rgb = [panel.data[idx], panel.data[n + idx], panel.data[2 * n + idx]];
            let (hue, sat, val) = color::hsv_of_rgb(rgb);
            if sat > SAT_GATE && val > VAL_GATE {
                bucket_votes[color::hue_bucket(hue)] += 1;
                fg.push((i, j, hue, sat * val));
            } else {
                rest.push((idx, rgb, val));
            }
        }
    }

    let hue_class = bucket_votes
        .iter()
        .enumerate()
        .max_by_key(|(_, v)| **v)
        .filter(|(_, v)| **v > 0)
        .map(|(k, _)| k);

    // slot-gated pixels grouped per segment marker
    let mut slot_pixels: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); color::SLOTS_PER_BUCKET];
    if let Some(class) = hue_class {
        for &(i, j, hue, wgt) in &fg {
            let (bucket, slot, dist) = color::nearest_slot(hue);
            if bucket == class && slot > 0 && dist <= SLOT_GATE && has_marker(slot - 1) {
                slot_pixels[slot].push((i as f64 + 0.5, j as f64 + 0.5, wgt));
            }
        }
    }
    let mut landmarks = Vec::new();
    for (slot, pixels) in slot_pixels.iter().enumerate().skip(1) {
        if pixels.is_empty() {
            continue;
        }
        let centroid = |sel: &dyn Fn(f64, f64) -> bool| -> (f64, f64, f64) {
            let (mut cw, mut cu, mut cv) = (0.0, 0.0, 0.0);
            for &(u, v, wgt) in pixels {
                if sel(u, v) {
                    cw += wgt;
                    cu += wgt * u;
                    cv += wgt * v;
                }
            }
            (cw, cu / cw.max(f64::MIN_POSITIVE), cv / cw.max(f64::MIN_POSITIVE))
        };
        let (mut cover, mut u, mut v) = centroid(&|_, _| true);
        if cover < MIN_COVERAGE {
            continue;
        }
        let mut radius = f64::INFINITY;
        for &(scale, pad) in &REFINE_SCHEDULE {
            radius = scale * (cover / std::f64::consts::PI).sqrt() + pad;
            let (cu, cv) = (u, v);
            let (nw, nu, nv) =
                centroid(&|pu, pv| (pu - cu).powi(2) + (pv - cv).powi(2) <= radius * radius);
            if nw < MIN_COVERAGE {
                break;
            }
            (cover, u, v) = (nw, nu, nv);
        }
        if cover < MIN_COVERAGE {
            continue;
        }
        let mut m2 = 0.0;
        for &(pu, pv, wgt) in pixels {
            let d2 = (pu - u).powi(2) + (pv - v).powi(2);
            if d2 <= radius * radius {
                m2 += wgt * d2;
            }
        }
        // a filled disk of mass W has second moment W^2 / (2 pi)
        let spread = 2.0 * std::f64::consts::PI * m2 / (cover * cover);
        landmarks.push(DetectedLandmark { segment: slot - 1, u, v, coverage: cover, spread });
    }

    // background level: median unsaturated brightness; anything measurably
    // below it counts toward the accessory blob by its darkness fraction
    let mut vals: Vec<f64> = rest.iter().map(|(_, _, v)| *v).collect();
    vals.sort_by(f64::total_cmp);
    let median = vals.get(vals.len() / 2).copied().unwrap_or(0.0);
    let mut bg_sum = [0.0f64; 3];
    let mut bg_count = 0usize;
    let mut dark_cover = 0.0f64;
    for (_, rgb, val) in &rest {
        if *val < median - 0.02 {
            let denom = (median - color::ACCESSORY_COLOR[0] as f64).max(1e-6);
            dark_cover += ((median - val) / denom).clamp(0.0, 1.0);
        } else {
            for c in 0..3 {
                bg_sum[c] += rgb[c] as f64;
            }
            bg_count += 1;
        }
    }
    let background =
        if bg_count > 0 { bg_sum.map(|s| s / bg_count as f64) } else { [0.0; 3] };
    PanelDetection {
        landmarks,
        hue_class,
        background,
        accessory: dark_cover >= ACCESSORY_AREA_GATE * accessory_expected_area(w.max(h)),
        foreground_pixels: fg.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::body::{fk, Appearance, BodyPose};
    use crate::sim::camera::Camera;
    use crate::sim::render::{body_scene, render_color};

    fn rendered_panel(app: Appearance, side: usize) -> (Tensor, Camera) {
        let body = fk(&BodyPose::neutral()).unwrap();
        let cam = Camera::on_ring(-20.0, 2.5, crate::sim::body::canonical_centroid(), side);
        let img = render_color(&body_scene(&body, &app), color::background_color(app.background), &cam, 4);
        (img, cam)
    }

    #[test]
    fn detects_most_segments_on_a_clean_render() {
        let app = Appearance { hue: 4, background: 2, accessory: false };
        let (img, cam) = rendered_panel(app, 128);
        let det = detect_panel(&img);
        assert_eq!(det.hue_class, Some(4));
        assert!(det.landmarks.len() >= 10, "found {}", det.landmarks.len());
        assert!(!det.accessory);
        let body = fk(&BodyPose::neutral()).unwrap();
        let mut errs: Vec<f64> = det
            .landmarks
            .iter()
            .map(|lm| {
                let (pu, pv) = cam.project(body.capsules[lm.segment].midpoint()).unwrap();
                ((lm.u - pu).powi(2) + (lm.v - pv).powi(2)).sqrt()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        let median = errs[errs.len() / 2];
        assert!(median < 0.3, "median centroid error {median} px");
        assert!(errs[errs.len() - 1] < 5.0, "worst centroid error {} px", errs.last().unwrap());
    }

    #[test]
    fn background_estimate_matches_the_class_gray() {
        for bg in 0..color::BACKGROUND_CLASSES {
            let app = Appearance { hue: 1, background: bg, accessory: false };
            let (img, _) = rendered_panel(app, 48);
            let det = detect_panel(&img);
            let want = color::BACKGROUND_LEVELS[bg] as f64;
            for c in det.background {
                assert!((c - want).abs() < 0.02, "class {bg}: {c} vs {want}");
            }
        }
    }

    #[test]
    fn the_accessory_blob_flips_the_flag() {
        for side in [32, 96] {
            for bg in [0, 3] {
                let with = Appearance { hue: 6, background: bg, accessory: true };
                let without = Appearance { hue: 6, background: bg, accessory: false };
                assert!(detect_panel(&rendered_panel(with, side).0).accessory, "side {side} bg {bg}");
                assert!(!detect_panel(&rendered_panel(without, side).0).accessory);
            }
        }
    }

    #[test]
    fn unmarked_segments_never_produce_landmarks() {
        let app = Appearance { hue: 3, background: 1, accessory: false };
        let (img, _) = rendered_panel(app, 96);
        let det = detect_panel(&img);
        assert!(det.landmarks.iter().all(|lm| has_marker(lm.segment)));
    }

    #[test]
    fn unoccluded_markers_look_like_disks() {
        let app = Appearance { hue: 0, background: 3, accessory: false };
        let (img, _) = rendered_panel(app, 128);
        let det = detect_panel(&img);
        let head = det.landmarks.iter().find(|lm| lm.segment == 3).expect("head detected");
        assert!((head.spread - 1.0).abs() < 0.1, "head spread {}", head.spread);
    }

    #[test]
    fn an_empty_panel_detects_nothing() {
        let flat = Tensor::full(vec![3, 16, 16], 0.36);
        let det = detect_panel(&flat);
        assert_eq!(det.hue_class, None);
        assert!(det.landmarks.is_empty());
        assert_eq!(det.foreground_pixels, 0);
    }

}
