//! Pinhole camera frames (OpenCV convention: x right, y down, z forward).

use crate::error::{invalid, Result};
use crate::geometry::{Mat3, Vec3};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame<T: Real> {
    pub intrinsics: Mat3<T>,
    /// Camera-to-world rotation.
    pub rotation: Mat3<T>,
    /// Camera center in world coordinates.
    pub translation: Vec3<T>,
    pub width: u32,
    pub height: u32,
    pub near: T,
    pub far: T,
}

/// Pixel coordinates plus camera-space depth of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<T> {
    pub u: T,
    pub v: T,
    pub depth: T,
}

pub const DEFAULT_WIDTH: u32 = 640;
pub const DEFAULT_HEIGHT: u32 = 480;

pub fn default_intrinsics<T: Real>() -> Mat3<T> {
    Mat3::new(
        T::lit(500.0),
        T::zero(),
        T::lit(320.0),
        T::zero(),
        T::lit(500.0),
        T::lit(240.0),
        T::zero(),
        T::zero(),
        T::one(),
    )
}

impl<T: Real> CameraFrame<T> {
    pub fn new(
        intrinsics: Mat3<T>,
        rotation: Mat3<T>,
        translation: Vec3<T>,
        width: u32,
        height: u32,
        near: T,
        far: T,
    ) -> Result<Self> {
        if intrinsics[(0, 0)] <= T::zero() || intrinsics[(1, 1)] <= T::zero() {
            return invalid("focal lengths must be positive");
        }
        if !(near < far) || near < T::zero() {
            return invalid(format!("need 0 <= near < far, got near={near} far={far}"));
        }
        if width == 0 || height == 0 {
            return invalid("image dimensions must be positive");
        }
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if ortho > T::lit(1e-6) || (rotation.determinant() - T::one()).abs() > T::lit(1e-6) {
            return invalid("pose rotation is not a proper orthonormal matrix");
        }
        if translation.iter().any(|v| !v.finite()) {
            return invalid("pose translation must be finite");
        }
        Ok(Self { intrinsics, rotation, translation, width, height, near, far })
    }

    /// Frame at `eye` looking toward `target`, with world `up` used to fix roll.
    /// Uses the default 640×480 intrinsics and a 0.1–10 m depth range.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() <= T::lit(1e-9) {
            return invalid("look_at target coincides with eye");
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() <= T::lit(1e-9) {
            return invalid("look_at direction parallel to up vector");
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        Self::new(
            default_intrinsics(),
            rotation,
            eye,
            DEFAULT_WIDTH,
            DEFAULT_HEIGHT,
            T::lit(0.1),
            T::lit(10.0),
        )
    }

    pub fn center(&self) -> Vec3<T> {
        self.translation
    }

    pub fn world_to_camera(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn camera_to_world(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation * p + self.translation
    }

    /// Projects a world point; `None` when it lies at or behind the camera plane.
    pub fn project(&self, p: &Vec3<T>) -> Option<Projection<T>> {
        let c = self.world_to_camera(p);
        if c.z <= T::zero() {
            return None;
        }
        let k = &self.intrinsics;
        let u = k[(0, 0)] * c.x / c.z + k[(0, 1)] * c.y / c.z + k[(0, 2)];
        let v = k[(1, 1)] * c.y / c.z + k[(1, 2)];
        Some(Projection { u, v, depth: c.z })
    }

    /// Frustum membership: depth in `[near, far]` and projection inside
    /// `[0, width) × [0, height)`.
    pub fn contains(&self, p: &Vec3<T>) -> bool {
        match self.project(p) {
            Some(pr) => {
                pr.depth >= self.near
                    && pr.depth <= self.far
                    && pr.u >= T::zero()
                    && pr.u < T::of_usize(self.width as usize)
                    && pr.v >= T::zero()
                    && pr.v < T::of_usize(self.height as usize)
            }
            None => false,
        }
    }

    /// World-space direction `R K⁻¹ (u, v, 1)`; a point at camera depth `d`
    /// along the pixel is `center + d * dir`.
    pub fn pixel_direction(&self, u: T, v: T) -> Vec3<T> {
        let k = &self.intrinsics;
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        self.rotation * Vec3::new(x, y, T::one())
    }

    pub fn optical_axis(&self) -> Vec3<T> {
        self.rotation.column(2).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn facing_x() -> CameraFrame<f64> {
        CameraFrame::look_at(Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 1.0), Vec3::z()).unwrap()
    }

    #[test]
    fn look_at_builds_proper_rotation() {
        let f = facing_x();
        assert_relative_eq!(f.optical_axis(), Vec3::x(), epsilon = 1e-12);
        // image x maps to world -y, image y (down) to world -z
        assert_relative_eq!(f.rotation.column(0).into_owned(), -Vec3::y(), epsilon = 1e-12);
        assert_relative_eq!(f.rotation.column(1).into_owned(), -Vec3::z(), epsilon = 1e-12);
    }

    #[test]
    fn point_on_axis_projects_to_principal_point() {
        let f = facing_x();
        let p = f.project(&Vec3::new(2.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(p.u, 320.0);
        assert_relative_eq!(p.v, 240.0);
        assert_relative_eq!(p.depth, 2.0);
        assert!(f.contains(&Vec3::new(2.0, 0.0, 1.0)));
        assert!(!f.contains(&Vec3::new(-2.0, 0.0, 1.0)));
        assert!(!f.contains(&Vec3::new(0.05, 0.0, 1.0)));
        assert!(!f.contains(&Vec3::new(11.0, 0.0, 1.0)));
    }

    #[test]
    fn pixel_direction_round_trips() {
        let f = CameraFrame::look_at(Vec3::new(0.3, 0.2, 1.1), Vec3::new(2.0, 1.0, 0.4), Vec3::z()).unwrap();
        for &(u, v, d) in &[(10.5, 20.25, 1.3), (639.0, 479.0, 4.0), (320.0, 240.0, 0.5)] {
            let p = f.center() + f.pixel_direction(u, v) * d;
            let pr = f.project(&p).unwrap();
            assert_relative_eq!(pr.u, u, epsilon = 1e-9);
            assert_relative_eq!(pr.v, v, epsilon = 1e-9);
            assert_relative_eq!(pr.depth, d, epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_frames_rejected() {
        let k = default_intrinsics::<f64>();
        let r = Mat3::identity();
        let t = Vec3::zeros();
        assert!(CameraFrame::new(k, r, t, 640, 480, 1.0, 0.5).is_err());
        assert!(CameraFrame::new(k, r * 2.0, t, 640, 480, 0.1, 10.0).is_err());
        let mut bad = k;
        bad[(0, 0)] = 0.0;
        assert!(CameraFrame::new(bad, r, t, 640, 480, 0.1, 10.0).is_err());
        assert!(CameraFrame::<f64>::look_at(Vec3::zeros(), Vec3::z(), Vec3::z()).is_err());
    }
}
