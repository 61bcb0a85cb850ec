use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{is_rotation, GeometryError};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx <= self.width as f64 && self.cy >= 0.0 && self.cy <= self.height as f64) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pixel to normalized image plane coordinates.
    pub fn normalize(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    pub fn denormalize(&self, xy: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * xy.x + self.cx, self.fy * xy.y + self.cy)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }
}

/// Calibrated pinhole camera. `rotation` and `translation` map world points
/// into the camera frame: `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        intrinsics.validate()?;
        if !is_rotation(&rotation, 1e-9) {
            return Err(GeometryError::InvalidCamera("rotation is not orthonormal with det +1".into()));
        }
        Ok(Self { intrinsics, rotation, translation })
    }

    /// Camera placed at `eye` looking at `target`; `up` fixes the roll and
    /// maps to image -y.
    pub fn look_at(
        intrinsics: Intrinsics,
        eye: &Vector3<f64>,
        target: &Vector3<f64>,
        up: &Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye).try_normalize(1e-12).ok_or_else(|| {
            GeometryError::InvalidCamera("eye and target coincide".into())
        })?;
        let x = z.cross(up).try_normalize(1e-9).ok_or_else(|| {
            GeometryError::InvalidCamera("up vector parallel to the viewing direction".into())
        })?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self::new(intrinsics, rotation, translation)
    }

    pub fn to_camera_frame(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Projects a world point; returns the pixel and the camera-frame depth.
    pub fn project(&self, point: &Vector3<f64>) -> Result<(Vector2<f64>, f64), GeometryError> {
        let pc = self.to_camera_frame(point);
        if pc.z <= 0.0 {
            return Err(GeometryError::PointBehindCamera(pc.z));
        }
        let xy = Vector2::new(pc.x / pc.z, pc.y / pc.z);
        Ok((self.intrinsics.denormalize(&xy), pc.z))
    }

    /// World point at camera-frame depth `depth` along the ray through `pixel`.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if !(depth > 0.0) {
            return Err(GeometryError::NonpositiveDepth(depth));
        }
        let xy = self.intrinsics.normalize(pixel);
        let pc = Vector3::new(xy.x * depth, xy.y * depth, depth);
        Ok(self.rotation.transpose() * (pc - self.translation))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit viewing direction (camera +z) in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap()
    }

    #[test]
    fn optical_axis_point_projects_to_principal_point() {
        let cam = Camera::new(k(), Matrix3::identity(), Vector3::zeros()).unwrap();
        let (px, depth) = cam.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(px, Vector2::new(64.0, 64.0));
        assert_eq!(depth, 2.0);
    }

    #[test]
    fn off_axis_point_follows_pinhole_formula() {
        let cam = Camera::new(k(), Matrix3::identity(), Vector3::zeros()).unwrap();
        let (px, _) = cam.project(&Vector3::new(1.0, 0.0, 1.0)).unwrap();
        assert_eq!(px.x, 164.0);
    }

    #[test]
    fn point_behind_camera_is_rejected() {
        let cam = Camera::new(k(), Matrix3::identity(), Vector3::zeros()).unwrap();
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::PointBehindCamera(_))
        ));
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, 0.0)),
            Err(GeometryError::PointBehindCamera(_))
        ));
    }

    #[test]
    fn unproject_principal_point() {
        let cam = Camera::new(k(), Matrix3::identity(), Vector3::zeros()).unwrap();
        let p = cam.unproject(&Vector2::new(64.0, 64.0), 1.0).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 1.0));
        assert!(matches!(
            cam.unproject(&Vector2::new(1.0, 1.0), 0.0),
            Err(GeometryError::NonpositiveDepth(_))
        ));
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        assert!(Intrinsics::new(-1.0, 100.0, 64.0, 64.0, 128, 128).is_err());
        assert!(Intrinsics::new(100.0, 100.0, 200.0, 64.0, 128, 128).is_err());
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(k(), skew, Vector3::zeros()).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Camera::new(k(), reflection, Vector3::zeros()).is_err());
    }

    #[test]
    fn look_at_points_axis_at_target() {
        let eye = Vector3::new(1.0, 2.0, -3.0);
        let cam = Camera::look_at(k(), &eye, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let (px, depth) = cam.project(&Vector3::zeros()).unwrap();
        assert!((px - Vector2::new(64.0, 64.0)).norm() < 1e-12);
        assert!((depth - eye.norm()).abs() < 1e-12);
        assert!((cam.center() - eye).norm() < 1e-12);
        assert!((cam.optical_axis() + eye.normalize()).norm() < 1e-12);
    }
}
