//! Articulated stick figure: 14 capsule segments posed by 14 joint angles.
//!
//! The canonical body stands in a T pose at zero angles, feet near y=0 and
//! head top near y=1, facing +z, left side toward +x. Angles 0..=2 place the
//! body globally (yaw about y, pitch about x, roll about z, pivoting at the
//! pelvis base); the rest articulate subtrees about fixed local axes.
//! Rotations apply leaf to root, so every pivot is expressed in coordinates
//! that earlier rotations have not touched.

use super::geom::{add, mat_mul, mat_vec, rot_x, rot_y, rot_z, scale, sub, Capsule, Mat3, Sphere, Vec3};
use super::SimError;

pub const N_JOINTS: usize = 14;
pub const N_SEGMENTS: usize = 14;

pub const JOINT_NAMES: [&str; N_JOINTS] = [
    "global_yaw",
    "global_pitch",
    "global_roll",
    "torso_bend",
    "torso_twist",
    "neck_bend",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
];

pub const SEGMENT_NAMES: [&str; N_SEGMENTS] = [
    "pelvis",
    "chest",
    "neck",
    "head",
    "left_upper_arm",
    "left_forearm",
    "left_hand",
    "right_upper_arm",
    "right_forearm",
    "right_hand",
    "left_thigh",
    "left_shin",
    "right_thigh",
    "right_shin",
];

pub const JOINT_LIMITS: [(f64, f64); N_JOINTS] = [
    (-std::f64::consts::PI, std::f64::consts::PI),
    (-0.3, 0.3),
    (-0.3, 0.3),
    (-0.5, 0.5),
    (-0.6, 0.6),
    (-0.6, 0.6),
    (-1.2, 1.2),
    (-1.2, 1.2),
    (0.0, 2.2),
    (0.0, 2.2),
    (-0.8, 0.8),
    (-0.8, 0.8),
    (0.0, 2.0),
    (0.0, 2.0),
];

const SCALE_RANGE: (f64, f64) = (0.5, 1.6);
const PELVIS_BASE: Vec3 = [0.0, 0.50, 0.0];

/// parent segment, offset from the parent's end, direction, length, radius
struct SegDef {
    parent: Option<usize>,
    offset: Vec3,
    dir: Vec3,
    len: f64,
    r: f64,
}

const X: Vec3 = [1.0, 0.0, 0.0];
const Y: Vec3 = [0.0, 1.0, 0.0];
const NX: Vec3 = [-1.0, 0.0, 0.0];
const NY: Vec3 = [0.0, -1.0, 0.0];
const O: Vec3 = [0.0, 0.0, 0.0];

// Radii and the neck length keep every rendered marker sphere clear of its
// neighbors' capsules from all ring azimuths in the T pose, so marker
// silhouettes stay full disks; crowded pelvis and neck carry no marker.
const SEGS: [SegDef; N_SEGMENTS] = [
    SegDef { parent: None, offset: O, dir: Y, len: 0.08, r: 0.045 },
    SegDef { parent: Some(0), offset: O, dir: Y, len: 0.20, r: 0.055 },
    SegDef { parent: Some(1), offset: O, dir: Y, len: 0.10, r: 0.030 },
    SegDef { parent: Some(2), offset: O, dir: Y, len: 0.11, r: 0.060 },
    SegDef { parent: Some(1), offset: [0.125, -0.02, 0.0], dir: X, len: 0.18, r: 0.030 },
    SegDef { parent: Some(4), offset: O, dir: X, len: 0.18, r: 0.025 },
    SegDef { parent: Some(5), offset: O, dir: X, len: 0.06, r: 0.022 },
    SegDef { parent: Some(1), offset: [-0.125, -0.02, 0.0], dir: NX, len: 0.18, r: 0.030 },
    SegDef { parent: Some(7), offset: O, dir: NX, len: 0.18, r: 0.025 },
    SegDef { parent: Some(8), offset: O, dir: NX, len: 0.06, r: 0.022 },
    SegDef { parent: Some(0), offset: [0.06, -0.08, 0.0], dir: NY, len: 0.24, r: 0.035 },
    SegDef { parent: Some(10), offset: O, dir: NY, len: 0.23, r: 0.030 },
    SegDef { parent: Some(0), offset: [-0.06, -0.08, 0.0], dir: NY, len: 0.24, r: 0.035 },
    SegDef { parent: Some(12), offset: O, dir: NY, len: 0.23, r: 0.030 },
];

/// Segments that carry a rendered marker sphere at their midpoint. The
/// pelvis and neck are skipped: both sit wedged between larger neighbors
/// that would clip their markers from most viewpoints.
pub fn has_marker(segment: usize) -> bool {
    segment != 0 && segment != 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Appearance {
    pub hue: usize,
    pub background: usize,
    pub accessory: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyPose {
    pub joint_angles: [f64; N_JOINTS],
    pub radius_scales: [f64; N_SEGMENTS],
    pub length_scales: [f64; N_SEGMENTS],
    pub appearance: Appearance,
}

impl BodyPose {
    pub fn neutral() -> Self {
        BodyPose {
            joint_angles: [0.0; N_JOINTS],
            radius_scales: [1.0; N_SEGMENTS],
            length_scales: [1.0; N_SEGMENTS],
            appearance: Appearance { hue: 0, background: 0, accessory: false },
        }
    }

    pub fn with_angles(angles: [f64; N_JOINTS]) -> Self {
        BodyPose { joint_angles: angles, ..Self::neutral() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (j, &a) in self.joint_angles.iter().enumerate() {
            let (lo, hi) = JOINT_LIMITS[j];
            if !a.is_finite() || a < lo || a > hi {
                return Err(SimError::AngleOutOfRange { joint: JOINT_NAMES[j], value: a, lo, hi });
            }
        }
        for s in self.radius_scales.iter().chain(self.length_scales.iter()) {
            if !s.is_finite() || *s < SCALE_RANGE.0 || *s > SCALE_RANGE.1 {
                return Err(SimError::ScaleOutOfRange { value: *s, lo: SCALE_RANGE.0, hi: SCALE_RANGE.1 });
            }
        }
        if self.appearance.hue >= super::color::HUE_CLASSES {
            return Err(SimError::ClassOutOfRange { what: "hue", value: self.appearance.hue, classes: super::color::HUE_CLASSES });
        }
        if self.appearance.background >= super::color::BACKGROUND_CLASSES {
            return Err(SimError::ClassOutOfRange {
                what: "background",
                value: self.appearance.background,
                classes: super::color::BACKGROUND_CLASSES,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub capsules: Vec<Capsule>,
    pub accessory: Sphere,
}

impl Body {
    /// One 3D landmark per segment, at the capsule midpoint.
    pub fn landmarks(&self) -> Vec<Vec3> {
        self.capsules.iter().map(Capsule::midpoint).collect()
    }
}

/// Extra clearance of each marker sphere over its capsule, so the sphere's
/// silhouette fully hides the capsule section beneath it.
pub const MARKER_EXTRA_RADIUS: f64 = 0.02;

// high enough that ring cameras see the whole ball over the head's end cap,
// low enough that its top stays inside every panel
const ACCESSORY_LIFT: f64 = 0.08;
pub const ACCESSORY_RADIUS: f64 = 0.045;

/// subtree membership per joint, leaf-to-root application order
const ARTICULATION: [(usize, &[usize]); 11] = [
    (12, &[11]),
    (13, &[13]),
    (8, &[5, 6]),
    (9, &[8, 9]),
    (5, &[2, 3]),
    (6, &[4, 5, 6]),
    (7, &[7, 8, 9]),
    (10, &[10, 11]),
    (11, &[12, 13]),
    (3, &[1, 2, 3, 4, 5, 6, 7, 8, 9]),
    (4, &[1, 2, 3, 4, 5, 6, 7, 8, 9]),
];

fn joint_rotation(joint: usize, angle: f64) -> Mat3 {
    match joint {
        3 | 5 => rot_x(angle),
        4 => rot_y(angle),
        6 | 8 => rot_z(-angle),
        7 | 9 => rot_z(angle),
        10 | 11 => rot_x(angle),
        12 | 13 => rot_x(-angle),
        _ => unreachable!(),
    }
}

/// pivot point of an articulation joint in T-pose coordinates
fn joint_pivot(joint: usize, base: &[Vec3; N_SEGMENTS], end: &[Vec3; N_SEGMENTS]) -> Vec3 {
    match joint {
        3 | 4 => end[0],
        5 => base[2],
        6 => base[4],
        7 => base[7],
        8 => base[5],
        9 => base[8],
        10 => base[10],
        11 => base[12],
        12 => base[11],
        13 => base[13],
        _ => unreachable!(),
    }
}

pub fn fk(pose: &BodyPose) -> Result<Body, SimError> {
    pose.validate()?;
    Ok(fk_unchecked(pose))
}

/// FK without limit validation, for optimizers probing just past the limits.
pub(crate) fn fk_unchecked(pose: &BodyPose) -> Body {
    let mut base = [O; N_SEGMENTS];
    let mut end = [O; N_SEGMENTS];
    for (i, def) in SEGS.iter().enumerate() {
        let anchor = match def.parent {
            None => PELVIS_BASE,
            Some(p) => end[p],
        };
        base[i] = add(anchor, def.offset);
        end[i] = add(base[i], scale(def.dir, def.len * pose.length_scales[i]));
    }
    let accessory_center = add(end[3], [0.0, ACCESSORY_LIFT + ACCESSORY_RADIUS, 0.0]);

    // point set per segment: (base, end); accessory rides with the head
    let mut pts: Vec<Vec3> = Vec::with_capacity(2 * N_SEGMENTS + 1);
    for i in 0..N_SEGMENTS {
        pts.push(base[i]);
        pts.push(end[i]);
    }
    pts.push(accessory_center);
    let member = |joint_members: &[usize], idx: usize| -> bool {
        if idx == 2 * N_SEGMENTS {
            // accessory follows the head segment
            return joint_members.contains(&3);
        }
        joint_members.contains(&(idx / 2))
    };

    for (joint, subtree) in ARTICULATION {
        let a = pose.joint_angles[joint];
        if a == 0.0 {
            continue;
        }
        let rot = joint_rotation(joint, a);
        let pivot = joint_pivot(joint, &base, &end);
        for (idx, p) in pts.iter_mut().enumerate() {
            if member(subtree, idx) {
                *p = add(mat_vec(&rot, sub(*p, pivot)), pivot);
            }
        }
    }

    let [yaw, pitch, roll] = [pose.joint_angles[0], pose.joint_angles[1], pose.joint_angles[2]];
    let global = mat_mul(&rot_y(yaw), &mat_mul(&rot_x(pitch), &rot_z(roll)));
    for p in pts.iter_mut() {
        *p = add(mat_vec(&global, sub(*p, PELVIS_BASE)), PELVIS_BASE);
    }

    let capsules = (0..N_SEGMENTS)
        .map(|i| Capsule { a: pts[2 * i], b: pts[2 * i + 1], r: SEGS[i].r * pose.radius_scales[i] })
        .collect();
    Body { capsules, accessory: Sphere { c: pts[2 * N_SEGMENTS], r: ACCESSORY_RADIUS } }
}

/// Centroid of the neutral body's landmarks; the camera ring looks here.
pub fn canonical_centroid() -> Vec3 {
    let body = fk(&BodyPose::neutral()).expect("neutral pose is valid");
    let lms = body.landmarks();
    let mut c = O;
    for p in &lms {
        c = add(c, *p);
    }
    scale(c, 1.0 / lms.len() as f64)
}

/// Largest reach of the body from a target point, including marker clearance.
pub fn body_extent(body: &Body, target: Vec3) -> f64 {
    let mut ext: f64 = super::geom::norm(sub(body.accessory.c, target)) + body.accessory.r;
    for cap in &body.capsules {
        for p in [cap.a, cap.b] {
            ext = ext.max(super::geom::norm(sub(p, target)) + cap.r + MARKER_EXTRA_RADIUS);
        }
    }
    ext
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        sub(a, b).iter().all(|d| d.abs() < tol)
    }

    #[test]
    fn t_pose_mirrors_left_and_right() {
        let body = fk(&BodyPose::neutral()).unwrap();
        let pairs = [(4, 7), (5, 8), (6, 9), (10, 12), (11, 13)];
        for (l, r) in pairs {
            let (cl, cr) = (&body.capsules[l], &body.capsules[r]);
            assert!(close([-cl.a[0], cl.a[1], cl.a[2]], cr.a, 1e-6));
            assert!(close([-cl.b[0], cl.b[1], cl.b[2]], cr.b, 1e-6));
            assert!((cl.r - cr.r).abs() < 1e-12);
        }
        // trunk stays on the mid-plane
        for i in [0, 1, 2, 3] {
            assert!(body.capsules[i].a[0].abs() < 1e-12);
            assert!(body.capsules[i].b[0].abs() < 1e-12);
        }
    }

    #[test]
    fn half_turn_negates_lateral_coordinates() {
        let mut angles = [0.0; N_JOINTS];
        angles[6] = 0.9;
        angles[8] = 1.1;
        angles[10] = -0.4;
        let before = fk(&BodyPose::with_angles(angles)).unwrap();
        angles[0] = std::f64::consts::PI;
        let after = fk(&BodyPose::with_angles(angles)).unwrap();
        for (b, a) in before.landmarks().iter().zip(after.landmarks()) {
            assert!(close([-b[0], b[1], -b[2]], a, 1e-6));
        }
    }

    #[test]
    fn right_angle_elbow_matches_hand_computation() {
        // left elbow at pi/2 folds the forearm straight down: the elbow sits
        // at (0.305, 0.76, 0), so the forearm ends at (0.305, 0.58, 0) and
        // the hand at (0.305, 0.52, 0)
        let mut angles = [0.0; N_JOINTS];
        angles[8] = std::f64::consts::FRAC_PI_2;
        let body = fk(&BodyPose::with_angles(angles)).unwrap();
        assert!(close(body.capsules[5].a, [0.305, 0.76, 0.0], 1e-12));
        assert!(close(body.capsules[5].b, [0.305, 0.58, 0.0], 1e-12));
        assert!(close(body.capsules[6].b, [0.305, 0.52, 0.0], 1e-12));
    }

    #[test]
    fn out_of_range_angle_is_rejected() {
        let mut angles = [0.0; N_JOINTS];
        angles[12] = -0.1;
        let err = fk(&BodyPose::with_angles(angles)).unwrap_err();
        match err {
            SimError::AngleOutOfRange { joint, .. } => assert_eq!(joint, "left_knee"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn scales_stretch_segments_and_children_follow() {
        let mut pose = BodyPose::neutral();
        pose.length_scales[0] = 1.25;
        pose.radius_scales[3] = 1.5;
        let body = fk(&pose).unwrap();
        assert!((body.capsules[0].b[1] - 0.60).abs() < 1e-12);
        assert!((body.capsules[1].a[1] - 0.60).abs() < 1e-12);
        assert!((body.capsules[3].r - 0.09).abs() < 1e-12);
        // legs attach relative to the pelvis end, so they ride up too
        assert!((body.capsules[10].a[1] - 0.52).abs() < 1e-12);
    }

    #[test]
    fn centroid_sits_on_the_vertical_axis() {
        let c = canonical_centroid();
        assert!(c[0].abs() < 1e-9 && c[2].abs() < 1e-9);
        assert!(c[1] > 0.4 && c[1] < 0.7);
    }
}
