use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::object::{random_unit3, SyntheticObject};
use super::SceneError;
use crate::geometry::{Camera, Intrinsics};

pub const IMAGE_SIZE: u32 = 256;

/// Viewpoint jitter shared by both cameras of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub image_size: u32,
    pub focal_range: (f64, f64),
    pub distance_range: (f64, f64),
    /// Elevation of the first camera above the object's ground plane, degrees.
    pub elevation_range: (f64, f64),
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { image_size: IMAGE_SIZE, focal_range: (200.0, 260.0), distance_range: (0.45, 0.6), elevation_range: (-10.0, 60.0) }
    }
}

fn look_at_origin<R: Rng>(rng: &mut R, cfg: &CameraConfig, direction: &Vector3<f64>) -> Result<Camera, SceneError> {
    let f = rng.gen_range(cfg.focal_range.0..=cfg.focal_range.1);
    let c = cfg.image_size as f64 / 2.0;
    let k = Intrinsics::new(f, f, c, c, cfg.image_size, cfg.image_size)?;
    let distance = rng.gen_range(cfg.distance_range.0..=cfg.distance_range.1);
    let up = if direction.z.abs() > 0.99 { Vector3::y() } else { Vector3::z() };
    Ok(Camera::look_at(k, &(direction * distance), &Vector3::zeros(), &up)?)
}

/// Two cameras aimed at the object center whose optical axes differ by an
/// angle drawn uniformly from `baseline_deg`.
pub fn sample_camera_pair(
    _object: &SyntheticObject,
    baseline_deg: (f64, f64),
    cfg: &CameraConfig,
    seed: u64,
) -> Result<(Camera, Camera), SceneError> {
    let (lo, hi) = baseline_deg;
    if !(0.0..=180.0).contains(&lo) || !(0.0..=180.0).contains(&hi) || lo > hi {
        return Err(SceneError::InvalidRange { lo, hi });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
    let elevation = rng.gen_range(cfg.elevation_range.0..=cfg.elevation_range.1).to_radians();
    let dir_a = Vector3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin());
    let angle = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let axis = loop {
        let r = random_unit3(&mut rng);
        if let Some(a) = dir_a.cross(&r).try_normalize(1e-6) {
            break a;
        }
    };
    let dir_b = Rotation3::from_axis_angle(&Unit::new_unchecked(axis), angle.to_radians()) * dir_a;
    let cam_a = look_at_origin(&mut rng, cfg, &dir_a)?;
    let cam_b = look_at_origin(&mut rng, cfg, &dir_b)?;
    Ok((cam_a, cam_b))
}

/// Angle between the optical axes in degrees.
pub fn baseline_angle_deg(a: &Camera, b: &Camera) -> f64 {
    let c = a.optical_axis().dot(&b.optical_axis()).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}
