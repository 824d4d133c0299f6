use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{is_proper_rotation, Mat3, Vec3};

/// Pinhole camera. View space follows the OpenCV convention: `x` right,
/// `y` down, `z` forward; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-view rotation.
    pub rotation: Mat3,
    /// World-to-view translation.
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let z = target - eye;
        if z.norm() < 1e-12 {
            return Err(Error::invalid("camera eye coincides with its target"));
        }
        let z = z.normalize();
        let y = -(up - z * up.dot(&z));
        if y.norm() < 1e-9 {
            return Err(Error::invalid("camera up vector is parallel to the view direction"));
        }
        let y = y.normalize();
        let x = y.cross(&z);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let cam = Camera {
            rotation,
            translation: -(rotation * eye),
            fx: focal,
            fy: focal,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            width,
            height,
            near: 0.01,
            far: 100.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::invalid("clip range must satisfy 0 < near < far"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be nonzero"));
        }
        if !is_proper_rotation(&self.rotation, 1e-6) {
            return Err(Error::invalid("camera rotation is not a proper rotation"));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_view(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a view-space point.
    pub fn project_view(&self, t: &Vec3) -> [f64; 2] {
        [self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy]
    }

    /// Affine Jacobian of the perspective projection at view-space `t`.
    pub fn jacobian(&self, t: &Vec3) -> [[f64; 3]; 2] {
        let iz = 1.0 / t.z;
        [
            [self.fx * iz, 0.0, -self.fx * t.x * iz * iz],
            [0.0, self.fy * iz, -self.fy * t.y * iz * iz],
        ]
    }

    /// Copy rendering at a different resolution with the same field of view.
    pub fn scaled(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at(Vec3::new(0.3, 0.2, -3.0), Vec3::zeros(), Vec3::y(), 100.0, 64, 48).unwrap();
        let t = cam.to_view(&Vec3::zeros());
        assert!(t.x.abs() < 1e-12 && t.y.abs() < 1e-12 && t.z > 0.0);
        assert!((cam.center() - Vec3::new(0.3, 0.2, -3.0)).norm() < 1e-12);
        // World up maps to image up (negative pixel y).
        let above = cam.project_view(&cam.to_view(&Vec3::new(0.0, 0.5, 0.0)));
        assert!(above[1] < 24.0);
    }

    #[test]
    fn rejects_bad_intrinsics() {
        let mut cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::y(), 100.0, 8, 8).unwrap();
        cam.near = 0.0;
        assert!(cam.validate().is_err());
    }
}
