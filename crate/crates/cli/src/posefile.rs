//! JSON sidecar files for poses and fitting keypoints.
//!
//! The core types carry no serialization of their own; these readers and
//! writers pin the on-disk schema in one place. Keys are emitted in sorted
//! order and numbers in shortest round-trip form, so writing is
//! deterministic.

use std::path::Path;

use mvicl_core::sim::body::{Appearance, BodyPose, N_JOINTS, N_SEGMENTS};
use mvicl_core::sim::Keypoint;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseFileError {
    #[error("pose file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("pose file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("pose file: {0}")]
    Schema(String),
    #[error("pose file holds an invalid pose: {0}")]
    Pose(#[from] mvicl_core::sim::SimError),
}

fn field<'v>(v: &'v Value, key: &str) -> Result<&'v Value, PoseFileError> {
    v.get(key).ok_or_else(|| PoseFileError::Schema(format!("missing field {key:?}")))
}

fn number(v: &Value, key: &str) -> Result<f64, PoseFileError> {
    v.as_f64().ok_or_else(|| PoseFileError::Schema(format!("field {key:?} must be a number")))
}

fn index(v: &Value, key: &str) -> Result<usize, PoseFileError> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| PoseFileError::Schema(format!("field {key:?} must be a nonnegative integer")))
}

fn float_array<const N: usize>(v: &Value, key: &str) -> Result<[f64; N], PoseFileError> {
    let arr = v
        .as_array()
        .ok_or_else(|| PoseFileError::Schema(format!("field {key:?} must be an array")))?;
    if arr.len() != N {
        return Err(PoseFileError::Schema(format!(
            "field {key:?} must hold {N} numbers, found {}",
            arr.len()
        )));
    }
    let mut out = [0.0; N];
    for (slot, item) in out.iter_mut().zip(arr) {
        *slot = number(item, key)?;
    }
    Ok(out)
}

pub fn pose_to_json(pose: &BodyPose) -> Value {
    json!({
        "joint_angles": pose.joint_angles.to_vec(),
        "radius_scales": pose.radius_scales.to_vec(),
        "length_scales": pose.length_scales.to_vec(),
        "appearance": {
            "hue": pose.appearance.hue,
            "background": pose.appearance.background,
            "accessory": pose.appearance.accessory,
        },
    })
}

pub fn pose_from_json(v: &Value) -> Result<BodyPose, PoseFileError> {
    let app = field(v, "appearance")?;
    let pose = BodyPose {
        joint_angles: float_array::<N_JOINTS>(field(v, "joint_angles")?, "joint_angles")?,
        radius_scales: float_array::<N_SEGMENTS>(field(v, "radius_scales")?, "radius_scales")?,
        length_scales: float_array::<N_SEGMENTS>(field(v, "length_scales")?, "length_scales")?,
        appearance: Appearance {
            hue: index(field(app, "hue")?, "hue")?,
            background: index(field(app, "background")?, "background")?,
            accessory: field(app, "accessory")?
                .as_bool()
                .ok_or_else(|| PoseFileError::Schema("field \"accessory\" must be a bool".into()))?,
        },
    };
    pose.validate()?;
    Ok(pose)
}

pub fn write_pose(path: &Path, pose: &BodyPose) -> Result<(), PoseFileError> {
    let mut text = serde_json::to_string_pretty(&pose_to_json(pose))?;
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}

pub fn read_pose(path: &Path) -> Result<BodyPose, PoseFileError> {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    pose_from_json(&v)
}

/// Keypoints measured in one ring camera: which view, the panel resolution
/// the pixel coordinates refer to, and the observed segment centers.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFile {
    pub azimuth_deg: f64,
    pub side: usize,
    pub points: Vec<Keypoint>,
}

pub fn write_keypoints(path: &Path, kf: &KeypointFile) -> Result<(), PoseFileError> {
    let points: Vec<Value> = kf
        .points
        .iter()
        .map(|k| json!({"segment": k.segment, "u": k.u, "v": k.v}))
        .collect();
    let v = json!({
        "azimuth_deg": kf.azimuth_deg,
        "side": kf.side,
        "points": points,
    });
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}

pub fn read_keypoints(path: &Path) -> Result<KeypointFile, PoseFileError> {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let arr = field(&v, "points")?
        .as_array()
        .ok_or_else(|| PoseFileError::Schema("field \"points\" must be an array".into()))?;
    let mut points = Vec::with_capacity(arr.len());
    for p in arr {
        points.push(Keypoint {
            segment: index(field(p, "segment")?, "segment")?,
            u: number(field(p, "u")?, "u")?,
            v: number(field(p, "v")?, "v")?,
        });
    }
    Ok(KeypointFile {
        azimuth_deg: number(field(&v, "azimuth_deg")?, "azimuth_deg")?,
        side: index(field(&v, "side")?, "side")?,
        points,
    })
}
