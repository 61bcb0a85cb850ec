//! Procedural object-centric view pairs: ellipsoid-composite objects in a
//! canonical unit cube, pinhole cameras around them, ray-cast depth / NOCS /
//! inverse-depth maps, view-dependent keypoint descriptors and reprojection
//! ground truth.

mod cameras;
pub mod io;
mod labels;
mod object;
mod pair;
mod render;
mod signal;

pub use cameras::{baseline_angle_deg, sample_camera_pair, CameraConfig, IMAGE_SIZE};
pub use labels::{label_ground_truth, reprojection_costs, MatchLabels, MATCH_THRESHOLD_PX, UNMATCHED_THRESHOLD_PX};
pub use object::{generate_object, ClassConfig, Ellipsoid, ShapeFamily, SyntheticObject, OBJECT_SIZE};
pub use pair::{
    derive_seed, encoder_input, generate_dataset, generate_pair, keypoint_signal, pair_seed, PairConfig, ScenePair,
    EVAL_BASELINE, TRAIN_BASELINE,
};
pub use render::{render_view, NoiseConfig, View, INVERSE_DEPTH_FILL, NOCS_FILL};
pub use signal::{corrupt_3d_signal, normalize_relative, SignalNoiseConfig};

use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid baseline range [{lo}, {hi}]: need 0 <= lo <= hi <= 180")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("only {visible} object points visible, need {needed}")]
    ObjectNotVisible { visible: usize, needed: usize },
    #[error("view has no ground-truth depth")]
    MissingDepth,
    #[error("i/o: {0}")]
    Io(String),
    #[error("malformed scene file: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
