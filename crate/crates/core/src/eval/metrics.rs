//! Multi-view consistency and semantic-control metrics.
//!
//! The consistency score triangulates every landmark seen in at least two
//! views, reprojects it everywhere it was seen, and averages the pixel error
//! normalized by the panel side, reported x1000. Per-observation normalized
//! error is capped at one image side so a single wild detection cannot
//! dominate a score. Attribute accuracy compares detector votes against the
//! caption per attribute.

use super::detect::{detect_panel, PanelDetection};
use super::dlt::dlt_triangulate;
use super::EvalError;
use crate::sim::dataset::caption_appearance;
use crate::sim::grid::split_grid;
use crate::sim::{color, Camera};
use crate::tensor::Tensor;

pub const REPORT_SCALE: f64 = 1000.0;
pub const MIN_PANEL_LANDMARKS: usize = 6;
/// A blob's disk-shape ratio rises when occlusion bites into it. The ratio
/// also grows as blobs shrink (rim pixels carry fractional mass), so the gate
/// compares each view against the segment's cleanest view instead of an
/// absolute shape: observations are dropped when they exceed the segment's
/// minimum ratio by this factor plus a small slack.
pub const SPREAD_HEADROOM: f64 = 1.12;
const SPREAD_SLACK: f64 = 0.04;
/// After a first-pass triangulation, each observation's blob mass is scaled
/// by its squared camera distance, which is constant across views for an
/// unoccluded marker. Observations whose normalized mass falls short of the
/// segment's best by more than a slack are dropped as occluded; the slack
/// widens for small blobs, whose fractional rim pixels jitter the mass.
pub const NORM_MASS_SLACK: f64 = 0.12;
const NORM_MASS_RIM_JITTER: f64 = 0.55;
/// With four surviving views of a segment, a single view is discarded when
/// removing it shrinks the segment's reprojection residual below this
/// fraction of the four-view residual.
const LOO_IMPROVEMENT: f64 = 0.4;

#[derive(Debug, Clone)]
pub struct ViewObservations {
    pub camera: Camera,
    /// indexed by landmark id; None marks unseen landmarks
    pub points: Vec<Option<(f64, f64)>>,
}

#[derive(Debug, Clone)]
pub struct LandmarkSet {
    pub views: Vec<ViewObservations>,
    pub n_landmarks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionReport {
    /// mean normalized reprojection error, x1000
    pub score: f64,
    pub used_landmarks: usize,
    /// landmarks dropped for having fewer than two views or a degenerate system
    pub skipped_landmarks: usize,
    pub observations: usize,
}

pub fn reprojection_error(set: &LandmarkSet) -> Result<ReprojectionReport, EvalError> {
    let mut total = 0.0f64;
    let mut observations = 0usize;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for id in 0..set.n_landmarks {
        let obs: Vec<(&Camera, (f64, f64))> = set
            .views
            .iter()
            .filter_map(|v| v.points[id].map(|p| (&v.camera, p)))
            .collect();
        if obs.len() < 2 {
            if !obs.is_empty() {
                skipped += 1;
            }
            continue;
        }
        let point = match dlt_triangulate(&obs) {
            Ok(p) => p,
            Err(EvalError::Degenerate { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        used += 1;
        for (cam, (u, v)) in obs {
            let side = cam.width.max(cam.height) as f64;
            let err = match cam.project(point) {
                Some((pu, pv)) => ((pu - u).powi(2) + (pv - v).powi(2)).sqrt() / side,
                None => 1.0,
            };
            total += err.min(1.0);
            observations += 1;
        }
    }
    if used == 0 {
        return Err(EvalError::NoUsableLandmarks);
    }
    Ok(ReprojectionReport {
        score: REPORT_SCALE * total / observations as f64,
        used_landmarks: used,
        skipped_landmarks: skipped,
        observations,
    })
}

#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub score: f64,
    /// panels whose detector output was too sparse to trust
    pub flagged_panels: Vec<usize>,
    pub reproj: ReprojectionReport,
}

/// Detect landmarks per panel of a [3,2S,2S] grid in [0,1] and score their
/// mutual geometric consistency under the given cameras.
pub fn mv_consistency_score(grid: &Tensor, cameras: &[Camera; 4]) -> Result<ConsistencyReport, EvalError> {
    let panels = split_grid(grid)?;
    let mut dets = Vec::new();
    let mut flagged = Vec::new();
    for (idx, panel) in panels.iter().enumerate() {
        let det = detect_panel(panel);
        if det.landmarks.len() < MIN_PANEL_LANDMARKS {
            flagged.push(idx);
            continue;
        }
        dets.push((idx, det));
    }
    if dets.len() < 2 {
        return Err(EvalError::NoUsableLandmarks);
    }
    // (view slot in dets, u, v, blob mass, disk-shape ratio) per segment
    let mut per_seg: Vec<Vec<(usize, f64, f64, f64, f64)>> =
        vec![Vec::new(); crate::sim::N_SEGMENTS];
    for (di, (_, det)) in dets.iter().enumerate() {
        for lm in &det.landmarks {
            per_seg[lm.segment].push((di, lm.u, lm.v, lm.coverage, lm.spread));
        }
    }
    for obs in per_seg.iter_mut() {
        if obs.len() < 2 {
            continue;
        }
        let cleanest = obs.iter().map(|o| o.4).fold(f64::INFINITY, f64::min);
        obs.retain(|o| o.4 <= cleanest * SPREAD_HEADROOM + SPREAD_SLACK);
        if obs.len() < 2 {
            continue;
        }
        let system: Vec<(&Camera, (f64, f64))> =
            obs.iter().map(|&(di, u, v, ..)| (&cameras[dets[di].0], (u, v))).collect();
        let Ok(point) = dlt_triangulate(&system) else { continue };
        let normed: Vec<f64> = obs
            .iter()
            .map(|&(di, _, _, mass, _)| {
                let p = cameras[dets[di].0].pos;
                let d2 = (0..3).map(|k| (p[k] - point[k]).powi(2)).sum::<f64>();
                mass * d2
            })
            .collect();
        let best = normed.iter().fold(0.0f64, |a, &b| a.max(b));
        let mean_mass = obs.iter().map(|o| o.3).sum::<f64>() / obs.len() as f64;
        let r_px = (mean_mass / std::f64::consts::PI).sqrt();
        let cut = 1.0 - NORM_MASS_SLACK.max(NORM_MASS_RIM_JITTER / r_px);
        let mut keep = normed.iter().map(|&c| c >= cut * best);
        obs.retain(|_| keep.next().unwrap());
        if obs.len() == 4 {
            let residual = |skip: Option<usize>| -> Option<f64> {
                let system: Vec<(&Camera, (f64, f64))> = obs
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| Some(*k) != skip)
                    .map(|(_, &(di, u, v, ..))| (&cameras[dets[di].0], (u, v)))
                    .collect();
                let point = dlt_triangulate(&system).ok()?;
                let mut total = 0.0;
                for (cam, (u, v)) in &system {
                    let side = cam.width.max(cam.height) as f64;
                    total += match cam.project(point) {
                        Some((pu, pv)) => {
                            (((pu - u).powi(2) + (pv - v).powi(2)).sqrt() / side).min(1.0)
                        }
                        None => 1.0,
                    };
                }
                Some(total / system.len() as f64)
            };
            if let Some(full) = residual(None) {
                let trials: Vec<(usize, f64)> = (0..4)
                    .filter_map(|k| residual(Some(k)).map(|r| (k, r)))
                    .collect();
                if let Some(&(worst, best)) =
                    trials.iter().min_by(|a, b| a.1.total_cmp(&b.1))
                {
                    if best < LOO_IMPROVEMENT * full {
                        obs.remove(worst);
                    }
                }
            }
        }
    }
    let views = dets
        .iter()
        .enumerate()
        .map(|(di, (idx, _))| {
            let mut points = vec![None; crate::sim::N_SEGMENTS];
            for (seg, obs) in per_seg.iter().enumerate() {
                if let Some(&(_, u, v, ..)) = obs.iter().find(|o| o.0 == di) {
                    points[seg] = Some((u, v));
                }
            }
            ViewObservations { camera: cameras[*idx].clone(), points }
        })
        .collect();
    let reproj = reprojection_error(&LandmarkSet { views, n_landmarks: crate::sim::N_SEGMENTS })?;
    Ok(ConsistencyReport { score: reproj.score, flagged_panels: flagged, reproj })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeReport {
    pub hue: f64,
    pub background: f64,
    pub accessory: f64,
    pub mean: f64,
    pub samples: usize,
}

/// Per-attribute agreement between detector votes over the four panels and
/// each sample's caption.
pub fn attribute_accuracy(samples: &[(&Tensor, &[usize])]) -> Result<AttributeReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySampleSet);
    }
    let (mut hue_ok, mut bg_ok, mut acc_ok) = (0usize, 0usize, 0usize);
    for (grid, caption) in samples {
        let want = caption_appearance(caption)
            .ok_or_else(|| EvalError::InvalidCaption { tokens: caption.to_vec() })?;
        let panels = split_grid(grid)?;
        let dets: Vec<PanelDetection> = panels.iter().map(detect_panel).collect();

        let mut hue_votes = [0usize; color::HUE_CLASSES];
        let mut acc_votes = 0usize;
        let mut bg_mean = [0.0f64; 3];
        for det in &dets {
            if let Some(k) = det.hue_class {
                hue_votes[k] += 1;
            }
            acc_votes += usize::from(det.accessory);
            for c in 0..3 {
                bg_mean[c] += det.background[c] / dets.len() as f64;
            }
        }
        let hue_win = hue_votes.iter().enumerate().max_by_key(|(_, v)| **v).map(|(k, _)| k);
        if hue_win == Some(want.hue) && hue_votes.iter().sum::<usize>() > 0 {
            hue_ok += 1;
        }
        let level = (bg_mean[0] + bg_mean[1] + bg_mean[2]) / 3.0;
        let bg_win = color::BACKGROUND_LEVELS
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (**a as f64 - level).abs().total_cmp(&(**b as f64 - level).abs())
            })
            .map(|(k, _)| k);
        if bg_win == Some(want.background) {
            bg_ok += 1;
        }
        if (acc_votes >= 2) == want.accessory {
            acc_ok += 1;
        }
    }
    let n = samples.len() as f64;
    let (hue, background, accessory) = (hue_ok as f64 / n, bg_ok as f64 / n, acc_ok as f64 / n);
    Ok(AttributeReport {
        hue,
        background,
        accessory,
        mean: (hue + background + accessory) / 3.0,
        samples: samples.len(),
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ranks = |xs: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
        let mut r = vec![0.0; xs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    cov / (va.sqrt() * vb.sqrt()).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::sim::body::{fk, N_SEGMENTS};
    use crate::sim::camera::ring_cameras;
    use crate::sim::dataset::{caption_tokens, gen_sample, random_pose, render_sample};
    use rand::Rng;

    fn exact_set(side: usize, pose_seed: u64) -> LandmarkSet {
        let mut r = rng::stream(pose_seed, "metrics.pose");
        let pose = random_pose(&mut r);
        let body = fk(&pose).unwrap();
        let lms = body.landmarks();
        let views = ring_cameras(side)
            .into_iter()
            .map(|camera| {
                let points = lms.iter().map(|&p| camera.project(p)).collect();
                ViewObservations { camera, points }
            })
            .collect();
        LandmarkSet { views, n_landmarks: N_SEGMENTS }
    }

    #[test]
    fn exact_observations_score_below_one_millionth() {
        let report = reprojection_error(&exact_set(512, 1)).unwrap();
        assert!(report.score < 1e-6, "score {}", report.score);
        assert_eq!(report.used_landmarks, N_SEGMENTS);
        assert_eq!(report.skipped_landmarks, 0);
    }

    #[test]
    fn a_four_pixel_shift_in_one_of_two_views_splits_evenly() {
        // symmetric two-camera geometry, one landmark on the ring target:
        // both views see the principal point; a horizontal shift slides along
        // the epipolar line, so the probe shifts v instead, leaving d/2 of
        // residual in each view and a score of 1000 * d / (2 * side)
        let side = 512;
        let target = crate::sim::body::canonical_centroid();
        let cams =
            [Camera::on_ring(-20.0, 2.5, target, side), Camera::on_ring(20.0, 2.5, target, side)];
        let views: Vec<ViewObservations> = cams
            .iter()
            .enumerate()
            .map(|(i, camera)| {
                let (u, mut v) = camera.project(target).unwrap();
                if i == 1 {
                    v += 4.0;
                }
                ViewObservations { camera: camera.clone(), points: vec![Some((u, v))] }
            })
            .collect();
        let report = reprojection_error(&LandmarkSet { views, n_landmarks: 1 }).unwrap();
        let want = 1000.0 * 4.0 / (2.0 * side as f64);
        assert!((report.score - want).abs() < 0.05 * want, "score {} want {want}", report.score);
    }

    #[test]
    fn rescaling_resolution_leaves_the_score_unchanged() {
        let mut r = rng::stream(9, "metrics.rescale");
        let base = exact_set(256, 2);
        // same geometry at doubled resolution, with noise scaled alongside
        let noisy = |set: &LandmarkSet, scale: f64, r: &mut rand_chacha::ChaCha8Rng| {
            let mut s = set.clone();
            for v in s.views.iter_mut() {
                v.camera.focal *= scale;
                v.camera.cx *= scale;
                v.camera.cy *= scale;
                v.camera.width = (v.camera.width as f64 * scale) as usize;
                v.camera.height = (v.camera.height as f64 * scale) as usize;
                for p in v.points.iter_mut().flatten() {
                    p.0 = p.0 * scale + 0.5 * rng::standard_normal(r);
                    p.1 = p.1 * scale + 0.5 * rng::standard_normal(r);
                }
            }
            s
        };
        let mut r2 = rng::stream(9, "metrics.rescale");
        let a = reprojection_error(&noisy(&base, 1.0, &mut r)).unwrap();
        let b = reprojection_error(&noisy(&base, 2.0, &mut r2)).unwrap();
        // the same pixel noise at doubled side costs half the normalized
        // error; equal-noise-fraction scores agree to first order
        assert!((a.score - 2.0 * b.score).abs() < 0.25 * a.score, "{} vs {}", a.score, b.score);
    }

    #[test]
    fn view_permutation_leaves_the_score_unchanged() {
        let set = exact_set(256, 3);
        let mut noisy = set.clone();
        let mut r = rng::stream(10, "metrics.permute");
        for v in noisy.views.iter_mut() {
            for p in v.points.iter_mut().flatten() {
                p.0 += rng::standard_normal(&mut r);
                p.1 += rng::standard_normal(&mut r);
            }
        }
        let a = reprojection_error(&noisy).unwrap();
        noisy.views.reverse();
        let b = reprojection_error(&noisy).unwrap();
        // summation order differs, so allow last-bit rounding
        assert!((a.score - b.score).abs() <= 1e-12 * a.score.abs().max(1.0));
    }

    #[test]
    fn score_rises_monotonically_with_noise() {
        let set = exact_set(256, 4);
        let sigmas: Vec<f64> = (0..10).map(|i| 0.2 * i as f64).collect();
        let mut medians = Vec::new();
        let mut r = rng::stream(11, "metrics.monotone");
        for &sigma in &sigmas {
            let mut scores = Vec::new();
            for _ in 0..100 {
                let mut s = set.clone();
                for v in s.views.iter_mut() {
                    for p in v.points.iter_mut().flatten() {
                        p.0 += sigma * rng::standard_normal(&mut r);
                        p.1 += sigma * rng::standard_normal(&mut r);
                    }
                }
                scores.push(reprojection_error(&s).unwrap().score);
            }
            scores.sort_by(f64::total_cmp);
            medians.push(scores[scores.len() / 2]);
        }
        let rho = spearman(&sigmas, &medians);
        assert!(rho > 0.95, "rho {rho}");
    }

    #[test]
    fn landmarks_seen_once_are_skipped_and_counted() {
        let mut set = exact_set(256, 5);
        for v in set.views.iter_mut().skip(1) {
            v.points[0] = None;
            v.points[1] = None;
        }
        let report = reprojection_error(&set).unwrap();
        assert_eq!(report.skipped_landmarks, 2);
        assert_eq!(report.used_landmarks, N_SEGMENTS - 2);
    }

    #[test]
    fn ground_truth_grids_score_under_half_a_permille() {
        let side = 160;
        let cams = ring_cameras(side);
        for index in [0, 1, 2] {
            let sample = gen_sample(21, index, side).unwrap();
            let report = mv_consistency_score(&sample.image, &cams).unwrap();
            assert!(report.score < 0.5, "sample {index} score {}", report.score);
            assert!(report.flagged_panels.is_empty(), "sample {index}");
        }
    }

    #[test]
    fn mixing_two_poses_scores_worse_than_the_matched_grid() {
        let side = 96;
        let a = gen_sample(22, 0, side).unwrap();
        let b = gen_sample(22, 1, side).unwrap();
        let cams = ring_cameras(side);
        let matched = mv_consistency_score(&a.image, &cams).unwrap();
        let a_panels = split_grid(&a.image).unwrap();
        let b_panels = split_grid(&b.image).unwrap();
        let mixed_grid = crate::sim::grid::compose_grid(&[
            a_panels[0].clone(),
            b_panels[1].clone(),
            a_panels[2].clone(),
            b_panels[3].clone(),
        ])
        .unwrap();
        let mixed = mv_consistency_score(&mixed_grid, &cams).unwrap();
        assert!(
            mixed.score > matched.score,
            "mixed {} matched {}",
            mixed.score,
            matched.score
        );
    }

    #[test]
    fn a_repeated_panel_registers_as_geometrically_impossible() {
        let side = 96;
        let sample = gen_sample(23, 0, side).unwrap();
        let cams = ring_cameras(side);
        let matched = mv_consistency_score(&sample.image, &cams).unwrap();
        let panels = split_grid(&sample.image).unwrap();
        let repeated = crate::sim::grid::compose_grid(&[
            panels[0].clone(),
            panels[0].clone(),
            panels[0].clone(),
            panels[0].clone(),
        ])
        .unwrap();
        let rep = mv_consistency_score(&repeated, &cams).unwrap();
        assert!(rep.score > 10.0 * matched.score.max(0.01), "repeated {}", rep.score);
    }

    #[test]
    fn ground_truth_attributes_read_back_almost_perfectly() {
        let side = 48;
        let samples: Vec<_> = (0..16).map(|i| gen_sample(24, i, side).unwrap()).collect();
        let refs: Vec<(&Tensor, &[usize])> =
            samples.iter().map(|s| (&s.image, s.caption.as_slice())).collect();
        let report = attribute_accuracy(&refs).unwrap();
        assert!(report.mean >= 0.98, "mean {}", report.mean);
        assert!(report.hue >= 0.98 && report.background >= 0.98 && report.accessory >= 0.98);
    }

    #[test]
    fn shuffled_captions_drop_hue_accuracy_to_chance() {
        let side = 24;
        let mut r = rng::stream(12, "metrics.shuffle");
        let mut grids = Vec::new();
        for i in 0..64 {
            let mut pose = random_pose(&mut r);
            pose.appearance.hue = r.gen_range(0..color::HUE_CLASSES);
            let s = render_sample(&pose, side).unwrap();
            let _ = i;
            grids.push(s);
        }
        let mut pairs = Vec::new();
        let mut captions = Vec::new();
        for g in &grids {
            for _ in 0..8 {
                let hue = r.gen_range(0..color::HUE_CLASSES);
                let mut app = g.pose.appearance;
                app.hue = hue;
                captions.push(caption_tokens(&app));
            }
        }
        for (k, g) in grids.iter().enumerate() {
            for j in 0..8 {
                pairs.push((&g.image, captions[k * 8 + j].as_slice()));
            }
        }
        let report = attribute_accuracy(&pairs).unwrap();
        assert_eq!(report.samples, 512);
        assert!((report.hue - 0.125).abs() <= 0.05, "hue accuracy {}", report.hue);
    }

    #[test]
    fn an_empty_sample_set_is_an_error_not_a_score() {
        assert!(matches!(attribute_accuracy(&[]).unwrap_err(), EvalError::EmptySampleSet));
    }

    #[test]
    fn spearman_ranks_behave() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[5.0, 3.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
