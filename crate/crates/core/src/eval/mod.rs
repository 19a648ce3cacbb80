//! Multi-view consistency metric (DLT triangulation + normalized
//! reprojection error) and semantic-control classification.

pub mod detect;
pub mod dlt;
pub mod jacobi;
pub mod metrics;

pub use detect::{detect_panel, PanelDetection};
pub use dlt::dlt_triangulate;
pub use metrics::{
    attribute_accuracy, mv_consistency_score, reprojection_error, spearman, AttributeReport,
    ConsistencyReport, LandmarkSet, ReprojectionReport, ViewObservations,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{got} views provided, triangulation needs at least 2")]
    TooFewViews { got: usize },
    #[error("degenerate triangulation system (relative eigengap {gap:e})")]
    Degenerate { gap: f64 },
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("no landmark was seen in two or more views")]
    NoUsableLandmarks,
    #[error("caption {tokens:?} does not encode a known appearance")]
    InvalidCaption { tokens: Vec<usize> },
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}
