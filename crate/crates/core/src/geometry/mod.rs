//! Camera models, projection, robust two-view relative pose, PnP and the
//! rotation-error metric used by the pose benchmarks.

mod camera;
mod essential;
mod pnp;

pub use camera::{Camera, Intrinsics};
pub use essential::{estimate_essential, recover_relative_pose, sampson_distance_px, EssentialEstimate};
pub use pnp::{solve_pnp, PnpEstimate};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    PointBehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonpositiveDepth(f64),
    #[error("input is not a rotation matrix")]
    NonRotationInput,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no essential-matrix decomposition puts a strict majority of points in front of both cameras")]
    CheiralityAmbiguity,
}

/// Rigid transform `x_dst = rotation * x_src + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Relative pose taking camera-A coordinates to camera-B coordinates.
    pub fn relative(cam_a: &Camera, cam_b: &Camera) -> Self {
        let a = Pose { rotation: cam_a.rotation, translation: cam_a.translation };
        let b = Pose { rotation: cam_b.rotation, translation: cam_b.translation };
        b.compose(&a.inverse())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D2D {
    pub pixel_a: Vector2<f64>,
    pub pixel_b: Vector2<f64>,
    pub confidence: Option<f64>,
}

impl Correspondence2D2D {
    pub fn new(pixel_a: Vector2<f64>, pixel_b: Vector2<f64>) -> Self {
        Self { pixel_a, pixel_b, confidence: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D3D {
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
    pub confidence: Option<f64>,
}

impl Correspondence2D3D {
    pub fn new(pixel: Vector2<f64>, point: Vector3<f64>) -> Self {
        Self { pixel, point, confidence: None }
    }
}

/// Robust-estimation settings shared by the essential-matrix and PnP loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Inlier threshold in pixels (Sampson distance for two-view, reprojection
    /// error for PnP).
    pub threshold_px: f64,
    pub min_inliers: usize,
    /// Early termination once this confidence of having drawn an all-inlier
    /// sample is reached; 1.0 always runs `max_iterations`.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { max_iterations: 2000, threshold_px: 1.0, min_inliers: 12, confidence: 0.9999, seed: 0 }
    }
}

impl RansacConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub(crate) fn required_iterations(&self, inlier_ratio: f64, sample_size: usize) -> usize {
        if inlier_ratio <= 0.0 || self.confidence >= 1.0 {
            return self.max_iterations;
        }
        let p_good = inlier_ratio.powi(sample_size as i32);
        if p_good >= 1.0 {
            return 1;
        }
        let n = (1.0 - self.confidence).ln() / (1.0 - p_good).ln();
        if n.is_finite() {
            (n.ceil() as usize).clamp(1, self.max_iterations)
        } else {
            self.max_iterations
        }
    }
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_error_deg(r_pred: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> Result<f64, GeometryError> {
    if !is_rotation(r_pred, 1e-6) || !is_rotation(r_gt, 1e-6) {
        return Err(GeometryError::NonRotationInput);
    }
    let cos = (((r_pred.transpose() * r_gt).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

/// Closest rotation in Frobenius norm.
pub(crate) fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Ratio of largest to smallest eigenvalue of the centered scatter matrix.
/// Large values flag collinear (2D) or coplanar (3D) samples.
pub(crate) fn scatter_condition<const D: usize>(points: &[nalgebra::SVector<f64, D>]) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().fold(nalgebra::SVector::<f64, D>::zeros(), |a, p| a + p) / n;
    let mut cov = nalgebra::DMatrix::<f64>::zeros(D, D);
    for p in points {
        let d = p - mean;
        for i in 0..D {
            for j in 0..D {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    let eig = cov.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Samples `k` distinct indices below `n`.
pub(crate) fn sample_indices<R: rand::Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    #[test]
    fn rotation_error_identity_and_half_turn() {
        let r = *Rotation3::from_euler_angles(0.3, -0.2, 1.1).matrix();
        assert_eq!(rotation_error_deg(&r, &r).unwrap(), 0.0);
        for axis in [Vector3::x(), Vector3::y(), Vector3::new(1.0, 2.0, -0.5).normalize()] {
            let flip = *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), std::f64::consts::PI).matrix();
            let e = rotation_error_deg(&r, &(r * flip)).unwrap();
            assert!((e - 180.0).abs() < 1e-6, "{e}");
        }
    }

    #[test]
    fn rotation_error_rejects_non_rotations() {
        let m = Matrix3::new(1.0, 0.2, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(rotation_error_deg(&m, &Matrix3::identity()), Err(GeometryError::NonRotationInput));
    }

    #[test]
    fn pose_relative_maps_camera_a_frame_to_camera_b_frame() {
        let k = Intrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap();
        let a = Camera::look_at(k, &Vector3::new(0.0, -2.0, 0.3), &Vector3::zeros(), &Vector3::z()).unwrap();
        let b = Camera::look_at(k, &Vector3::new(1.5, -1.0, 0.5), &Vector3::zeros(), &Vector3::z()).unwrap();
        let rel = Pose::relative(&a, &b);
        let x = Vector3::new(0.1, 0.2, -0.05);
        let lhs = rel.transform(&a.to_camera_frame(&x));
        assert!((lhs - b.to_camera_frame(&x)).norm() < 1e-12);
        assert!((rel.compose(&rel.inverse()).rotation - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn ransac_iteration_bound() {
        let cfg = RansacConfig::default();
        assert_eq!(cfg.required_iterations(1.0, 8), 1);
        assert_eq!(cfg.required_iterations(0.0, 8), 2000);
        let n = cfg.required_iterations(0.7, 8);
        assert!(n > 50 && n < 2000, "{n}");
    }
}
