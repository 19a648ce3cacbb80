//! Synthetic multi-view samples: posed body, four-view grids, captions.
//!
//! Image grids hold [0,1] colors; depth grids hold ray distances divided by
//! (ring radius + body extent) so foreground depth lies in (0,1] with 0 as
//! the background sentinel, and the mask equals depth > 0 pixel for pixel.
//! Samples are deterministic given (seed, index): each draws from its own
//! counter-derived stream, so generation parallelizes without reordering
//! randomness.

use super::body::{body_extent, canonical_centroid, fk, Appearance, BodyPose, N_JOINTS};
use super::camera::{ring_cameras, RING_RADIUS};
use super::color;
use super::grid::compose_grid;
use super::render::{body_scene, render_color, render_depth, SUPERSAMPLE};
use super::SimError;
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use rayon::prelude::*;

/// Token layout: 0 is the null caption, then hue, background, accessory.
pub const HUE_TOKEN_BASE: usize = 1;
pub const BACKGROUND_TOKEN_BASE: usize = 9;
pub const ACCESSORY_TOKEN_BASE: usize = 13;

pub fn caption_tokens(app: &Appearance) -> Vec<usize> {
    vec![
        HUE_TOKEN_BASE + app.hue,
        BACKGROUND_TOKEN_BASE + app.background,
        ACCESSORY_TOKEN_BASE + usize::from(app.accessory),
    ]
}

/// Appearance encoded by a caption, if the tokens are well formed.
pub fn caption_appearance(tokens: &[usize]) -> Option<Appearance> {
    match tokens {
        [h, b, a]
            if (HUE_TOKEN_BASE..HUE_TOKEN_BASE + color::HUE_CLASSES).contains(h)
                && (BACKGROUND_TOKEN_BASE..BACKGROUND_TOKEN_BASE + color::BACKGROUND_CLASSES).contains(b)
                && (ACCESSORY_TOKEN_BASE..ACCESSORY_TOKEN_BASE + 2).contains(a) =>
        {
            Some(Appearance {
                hue: h - HUE_TOKEN_BASE,
                background: b - BACKGROUND_TOKEN_BASE,
                accessory: *a == ACCESSORY_TOKEN_BASE + 1,
            })
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub depth: Tensor,
    pub mask: Tensor,
    pub caption: Vec<usize>,
    pub pose: BodyPose,
}

/// Random pose over comfortable sub-ranges of the joint limits, keeping the
/// figure open enough that most markers stay visible from the ring.
pub fn random_pose(r: &mut impl Rng) -> BodyPose {
    let mut angles = [0.0; N_JOINTS];
    let spans: [(f64, f64); N_JOINTS] = [
        (-0.45, 0.45),
        (-0.12, 0.12),
        (-0.12, 0.12),
        (-0.25, 0.25),
        (-0.30, 0.30),
        (-0.30, 0.30),
        (-0.55, 0.55),
        (-0.55, 0.55),
        (0.10, 0.80),
        (0.10, 0.80),
        (-0.35, 0.35),
        (-0.35, 0.35),
        (0.05, 0.70),
        (0.05, 0.70),
    ];
    for (a, (lo, hi)) in angles.iter_mut().zip(spans) {
        *a = r.gen_range(lo..hi);
    }
    let mut pose = BodyPose::with_angles(angles);
    for s in pose.radius_scales.iter_mut() {
        *s = r.gen_range(0.9..1.1);
    }
    for s in pose.length_scales.iter_mut() {
        *s = r.gen_range(0.9..1.1);
    }
    pose.appearance = Appearance {
        hue: r.gen_range(0..color::HUE_CLASSES),
        background: r.gen_range(0..color::BACKGROUND_CLASSES),
        accessory: r.gen_bool(0.5),
    };
    pose
}

/// Render one sample's grids for a pose at the given panel side.
pub fn render_sample(pose: &BodyPose, side: usize) -> Result<Sample, SimError> {
    let body = fk(pose)?;
    let scene = body_scene(&body, &pose.appearance);
    let target = canonical_centroid();
    let depth_norm = (RING_RADIUS + body_extent(&body, target)) as f32;
    let background = color::background_color(pose.appearance.background);

    let mut images = Vec::with_capacity(4);
    let mut depths = Vec::with_capacity(4);
    let mut masks = Vec::with_capacity(4);
    for cam in ring_cameras(side) {
        images.push(render_color(&scene, background, &cam, SUPERSAMPLE));
        let mut depth = render_depth(&scene, &cam);
        let mut mask = vec![0.0f32; depth.data.len()];
        for (d, m) in depth.data.iter_mut().zip(mask.iter_mut()) {
            if *d > 0.0 {
                *d /= depth_norm;
                *m = 1.0;
            }
        }
        masks.push(Tensor::new(mask, depth.shape.clone()));
        depths.push(depth);
    }
    let image = compose_grid(&images.try_into().expect("four panels"))?;
    let depth = compose_grid(&depths.try_into().expect("four panels"))?;
    let mask = compose_grid(&masks.try_into().expect("four panels"))?;
    Ok(Sample { image, depth, mask, caption: caption_tokens(&pose.appearance), pose: pose.clone() })
}

pub fn gen_sample(seed: u64, index: u64, side: usize) -> Result<Sample, SimError> {
    let mut r = rng::indexed_stream(seed, "dataset.sample", index);
    render_sample(&random_pose(&mut r), side)
}

/// n samples in index order, generated in parallel.
pub fn gen_dataset(n: usize, seed: u64, side: usize) -> Result<Vec<Sample>, SimError> {
    (0..n as u64).into_par_iter().map(|i| gen_sample(seed, i, side)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::camera::project_landmarks;
    use crate::sim::grid::split_grid;

    #[test]
    fn same_seed_generates_identical_samples() {
        let a = gen_dataset(2, 7, 16).unwrap();
        let b = gen_dataset(2, 7, 16).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].pose.joint_angles, a[1].pose.joint_angles);
    }

    #[test]
    fn mask_marks_exactly_the_positive_depth_pixels() {
        let s = gen_sample(11, 0, 24).unwrap();
        assert_eq!(s.image.shape, vec![3, 48, 48]);
        assert_eq!(s.depth.shape, vec![1, 48, 48]);
        for (d, m) in s.depth.data.iter().zip(&s.mask.data) {
            if *d > 0.0 {
                assert_eq!(*m, 1.0);
                assert!(*d <= 1.0);
            } else {
                assert_eq!((*d, *m), (0.0, 0.0));
            }
        }
        let cover: f32 = s.mask.data.iter().sum();
        assert!(cover > 100.0, "figure covers {cover} pixels");
    }

    #[test]
    fn captions_round_trip_to_appearances() {
        for hue in 0..color::HUE_CLASSES {
            for bg in 0..color::BACKGROUND_CLASSES {
                for acc in [false, true] {
                    let app = Appearance { hue, background: bg, accessory: acc };
                    assert_eq!(caption_appearance(&caption_tokens(&app)), Some(app));
                }
            }
        }
        assert_eq!(caption_appearance(&[0, 9, 13]), None);
        assert_eq!(caption_appearance(&[1, 9]), None);
    }

    #[test]
    fn saturated_pixels_stay_in_the_caption_hue_bucket() {
        let s = gen_sample(3, 1, 32).unwrap();
        let hue_class = s.caption[0] - HUE_TOKEN_BASE;
        let n = s.image.data.len() / 3;
        let mut fg = 0;
        for i in 0..n {
            let rgb = [s.image.data[i], s.image.data[n + i], s.image.data[2 * n + i]];
            let (hue, sat, _) = color::hsv_of_rgb(rgb);
            if sat > 0.25 {
                assert_eq!(color::hue_bucket(hue), hue_class);
                fg += 1;
            }
        }
        assert!(fg > 50);
    }

    #[test]
    fn landmarks_project_inside_the_dilated_mask() {
        let side = 64;
        let s = gen_sample(5, 2, side).unwrap();
        let body = fk(&s.pose).unwrap();
        let panels = split_grid(&s.mask).unwrap();
        for (cam, panel) in ring_cameras(side).iter().zip(panels.iter()) {
            for p in project_landmarks(&body.landmarks(), cam).into_iter().flatten() {
                let (i, j) = (p.0 as isize, p.1 as isize);
                let hit = (-2..=2).any(|dj| {
                    (-2..=2).any(|di| {
                        let (x, y) = (i + di, j + dj);
                        x >= 0
                            && y >= 0
                            && (x as usize) < side
                            && (y as usize) < side
                            && panel.data[y as usize * side + x as usize] > 0.0
                    })
                });
                assert!(hit, "landmark at ({i},{j}) outside dilated mask");
            }
        }
    }
}
