//! Desk-scale body simulator: articulated capsule figure, ring cameras,
//! analytic renderer, pose fitting, and dataset generation.

pub mod body;
pub mod camera;
pub mod color;
pub mod dataset;
pub mod fit;
pub mod geom;
pub mod grid;
pub mod render;

pub use body::{fk, Appearance, Body, BodyPose, N_JOINTS, N_SEGMENTS};
pub use camera::{ring_cameras, Camera};
pub use dataset::{caption_appearance, caption_tokens, gen_dataset, gen_sample, random_pose, render_sample, Sample};
pub use fit::{fit_pose, FitReport, Keypoint};
pub use grid::{compose_grid, split_grid};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("joint {joint} angle {value} outside [{lo}, {hi}]")]
    AngleOutOfRange { joint: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("shape scale {value} outside [{lo}, {hi}]")]
    ScaleOutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("{what} id {value} exceeds the {classes} known classes")]
    ClassOutOfRange { what: &'static str, value: usize, classes: usize },
    #[error("panel shape mismatch: expected {expected:?}, got {got:?}")]
    PanelShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("{got} keypoints provided, at least {need} required")]
    TooFewKeypoints { got: usize, need: usize },
}
