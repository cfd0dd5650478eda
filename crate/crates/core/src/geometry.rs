//! Quaternions, rotations and the scale/rotation covariance parameterization.

use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Result};
use crate::scalar::Real;

pub type Vec3<T> = Vector3<T>;
pub type Mat3<T> = Matrix3<T>;

/// Quaternion stored as `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat<T>(pub [T; 4]);

impl<T: Real> Quat<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self([w, x, y, z])
    }

    pub fn identity() -> Self {
        Self([T::one(), T::zero(), T::zero(), T::zero()])
    }

    /// Rotation of `angle` radians about a unit `axis`.
    pub fn from_axis_angle(axis: &Vec3<T>, angle: T) -> Self {
        let half = angle * T::lit(0.5);
        let (s, c) = (half.sin(), half.cos());
        Self([c, axis.x * s, axis.y * s, axis.z * s])
    }

    pub fn w(&self) -> T {
        self.0[0]
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.0
            .iter()
            .zip(other.0.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn neg(&self) -> Self {
        Self(self.0.map(|v| -v))
    }

    pub fn scaled(&self, k: T) -> Self {
        Self(self.0.map(|v| v * k))
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.0;
        for (o, &b) in out.iter_mut().zip(other.0.iter()) {
            *o += b;
        }
        Self(out)
    }

    /// Unit-norm copy. Fails for a (numerically) zero quaternion.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !n.finite() || n <= T::lit(1e-12) {
            return invalid(format!("quaternion with norm {n} cannot be normalized"));
        }
        Ok(self.scaled(T::one() / n))
    }
}

/// Rotation matrix of a (near-)unit quaternion. The input is renormalized first.
pub fn quat_to_rotation<T: Real>(q: &Quat<T>) -> Result<Mat3<T>> {
    let [w, x, y, z] = q.normalized()?.0;
    let two = T::lit(2.0);
    let one = T::one();
    Ok(Mat3::new(
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    ))
}

/// Symmetric positive-definite 3×3 covariance `R S Sᵀ Rᵀ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance<T: Real>(pub Mat3<T>);

impl<T: Real> Covariance<T> {
    pub fn matrix(&self) -> &Mat3<T> {
        &self.0
    }
}

fn check_scale<T: Real>(scale: &Vec3<T>) -> Result<()> {
    if scale.iter().any(|&s| !s.finite() || s <= T::zero()) {
        return invalid(format!(
            "scale components must be finite and > 0, got ({}, {}, {})",
            scale.x, scale.y, scale.z
        ));
    }
    Ok(())
}

pub fn covariance<T: Real>(scale: &Vec3<T>, q: &Quat<T>) -> Result<Covariance<T>> {
    check_scale(scale)?;
    let r = quat_to_rotation(q)?;
    let s2 = Mat3::from_diagonal(&scale.component_mul(scale));
    let sigma = r * s2 * r.transpose();
    // symmetrize away rounding asymmetry
    Ok(Covariance((sigma + sigma.transpose()) * T::lit(0.5)))
}

/// Closed-form inverse `R S⁻² Rᵀ` of the covariance built from the same inputs.
pub fn precision<T: Real>(scale: &Vec3<T>, q: &Quat<T>) -> Result<Mat3<T>> {
    check_scale(scale)?;
    let r = quat_to_rotation(q)?;
    let inv_s2 = Mat3::from_diagonal(&scale.map(|s| T::one() / (s * s)));
    let p = r * inv_s2 * r.transpose();
    Ok((p + p.transpose()) * T::lit(0.5))
}
