//! Semantic Gaussian primitives and their kernel/density evaluation.

use crate::error::{invalid, Result};
use crate::geometry::{covariance, precision, Covariance, Mat3, Quat, Vec3};
use crate::scalar::{softmax, Real};

/// Scales below this are clamped at construction (meters).
pub const MIN_SCALE: f64 = 1e-4;

/// Number of classes including the trailing empty class.
pub const DEFAULT_CLASSES: usize = 12;

/// One anisotropic semantic Gaussian.
///
/// `logits` cover the occupied classes only; the empty probability of a
/// rendered voxel comes from opacity. The per-primitive feature embedding
/// lives in the owning [`PrimitiveBatch`](crate::attn::PrimitiveBatch).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive<T: Real> {
    pub mean: Vec3<T>,
    pub scale: Vec3<T>,
    pub rotation: Quat<T>,
    pub opacity: T,
    pub logits: Vec<T>,
}

impl<T: Real> GaussianPrimitive<T> {
    /// Validating constructor: renormalizes the rotation, clamps tiny scales
    /// to [`MIN_SCALE`] and rejects non-finite values, non-positive scales
    /// and out-of-range opacity.
    pub fn new(
        mean: Vec3<T>,
        scale: Vec3<T>,
        rotation: Quat<T>,
        opacity: T,
        logits: Vec<T>,
    ) -> Result<Self> {
        if mean.iter().any(|v| !v.finite()) {
            return invalid("mean must be finite");
        }
        if scale.iter().any(|&s| !s.finite() || s <= T::zero()) {
            return invalid(format!("scale must be finite and > 0, got {scale:?}"));
        }
        if !opacity.finite() || opacity < T::zero() || opacity > T::one() {
            return invalid(format!("opacity {opacity} outside [0, 1]"));
        }
        if logits.iter().any(|v| !v.finite()) {
            return invalid("logits must be finite");
        }
        let min = T::lit(MIN_SCALE);
        Ok(Self {
            mean,
            scale: scale.map(|s| s.max(min)),
            rotation: rotation.normalized()?,
            opacity,
            logits,
        })
    }

    /// Unit-scale, identity-rotation primitive; handy in tests.
    pub fn isotropic(mean: Vec3<T>, sigma: T, opacity: T, logits: Vec<T>) -> Result<Self> {
        Self::new(mean, Vec3::repeat(sigma), Quat::identity(), opacity, logits)
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len() + 1
    }

    pub fn covariance(&self) -> Covariance<T> {
        covariance(&self.scale, &self.rotation).expect("validated primitive")
    }

    /// Softmax-normalized class probabilities over the occupied classes.
    pub fn class_probs(&self) -> Vec<T> {
        softmax(&self.logits)
    }

    pub fn kernel(&self, x: &Vec3<T>) -> T {
        GaussianKernel::new(self).kernel(x)
    }

    pub fn density(&self, x: &Vec3<T>) -> T {
        GaussianKernel::new(self).density(x)
    }

    /// Index of the largest logit (ties toward the lower class).
    pub fn argmax_class(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.logits.iter().enumerate() {
            if v > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Un-normalized kernel `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn kernel<T: Real>(x: &Vec3<T>, g: &GaussianPrimitive<T>) -> T {
    g.kernel(x)
}

/// Normalized trivariate Gaussian pdf at `x`.
pub fn density<T: Real>(x: &Vec3<T>, g: &GaussianPrimitive<T>) -> T {
    g.density(x)
}

/// Per-primitive quantities cached for a render pass.
#[derive(Clone, Debug)]
pub struct GaussianKernel<T: Real> {
    pub mean: Vec3<T>,
    pub precision: Mat3<T>,
    /// `1 / ((2π)^{3/2} |Σ|^{1/2})`
    pub norm: T,
    /// Half extents of the axis-aligned box bounding the unit Mahalanobis
    /// ellipsoid, i.e. `sqrt(diag Σ)`.
    pub axis_sigma: Vec3<T>,
}

impl<T: Real> GaussianKernel<T> {
    pub fn new(g: &GaussianPrimitive<T>) -> Self {
        let precision = precision(&g.scale, &g.rotation).expect("validated primitive");
        let sigma = g.covariance().0;
        let two_pi = T::lit(2.0) * T::PI();
        let det_sqrt = g.scale.x * g.scale.y * g.scale.z;
        Self {
            mean: g.mean,
            precision,
            norm: T::one() / (two_pi.powf(T::lit(1.5)) * det_sqrt),
            axis_sigma: Vec3::new(sigma[(0, 0)].sqrt(), sigma[(1, 1)].sqrt(), sigma[(2, 2)].sqrt()),
        }
    }

    #[inline]
    pub fn mahalanobis_sq(&self, x: &Vec3<T>) -> T {
        let d = x - self.mean;
        d.dot(&(self.precision * d))
    }

    #[inline]
    pub fn kernel(&self, x: &Vec3<T>) -> T {
        (-T::lit(0.5) * self.mahalanobis_sq(x)).exp()
    }

    #[inline]
    pub fn density(&self, x: &Vec3<T>) -> T {
        self.norm * self.kernel(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn prim(mean: [f64; 3], scale: [f64; 3], q: Quat<f64>) -> GaussianPrimitive<f64> {
        GaussianPrimitive::new(Vec3::from(mean), Vec3::from(scale), q, 1.0, vec![0.0; 11]).unwrap()
    }

    #[test]
    fn kernel_is_one_at_mean() {
        let g = prim([0.3, -1.0, 2.0], [1.0, 2.0, 3.0], Quat::identity());
        assert_eq!(g.kernel(&g.mean), 1.0);
    }

    #[test]
    fn isotropic_unit_offset() {
        let g = prim([0.0; 3], [1.0; 3], Quat::identity());
        let k = g.kernel(&Vec3::new(0.6, 0.8, 0.0));
        assert_relative_eq!(k, (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(k, 0.60653, epsilon = 1e-5);
    }

    #[test]
    fn anisotropic_kernel_matches_dense_solve() {
        let q = Quat::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0).normalize(), 0.4);
        let g = prim([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], q);
        let sigma = g.covariance().0;
        for axis in 0..3 {
            let mut d = Vec3::zeros();
            d[axis] = 1.3;
            let x = g.mean + d;
            let solved = sigma.lu().solve(&d).unwrap();
            let oracle = (-0.5 * d.dot(&solved)).exp();
            assert_relative_eq!(g.kernel(&x), oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn density_at_mean() {
        let g = prim([0.0; 3], [1.0; 3], Quat::identity());
        assert_relative_eq!(g.density(&g.mean), (2.0 * std::f64::consts::PI).powf(-1.5), epsilon = 1e-15);
        assert_relative_eq!(g.density(&g.mean), 0.0634936, epsilon = 1e-7);
        let g = prim([0.0; 3], [2.0; 3], Quat::identity());
        assert_relative_eq!(g.density(&g.mean), 0.0079367, epsilon = 1e-7);
    }

    #[test]
    fn density_integrates_to_one() {
        // Riemann sum over ±5σ on the widest axis
        let q = Quat::from_axis_angle(&Vec3::z(), 0.7);
        let g = prim([0.2, -0.1, 0.4], [0.5, 0.3, 0.4], q);
        let h = 0.05;
        let n = (5.0 * 0.5 / h) as i32;
        let kern = GaussianKernel::new(&g);
        let mut total = 0.0;
        for i in -n..=n {
            for j in -n..=n {
                for k in -n..=n {
                    let x = g.mean + Vec3::new(i as f64, j as f64, k as f64) * h;
                    total += kern.density(&x);
                }
            }
        }
        total *= h * h * h;
        assert!((total - 1.0).abs() < 0.02, "integral {total}");
    }

    #[test]
    fn constructor_validation() {
        let m = Vec3::zeros();
        assert!(GaussianPrimitive::new(m, Vec3::new(1.0, 0.0, 1.0), Quat::identity(), 0.5, vec![]).is_err());
        assert!(GaussianPrimitive::new(m, Vec3::repeat(1.0), Quat::identity(), 1.5, vec![]).is_err());
        assert!(GaussianPrimitive::new(m, Vec3::repeat(1.0), Quat::new(0.0, 0.0, 0.0, 0.0), 0.5, vec![]).is_err());
        let g = GaussianPrimitive::new(m, Vec3::new(1e-7, 1.0, 1.0), Quat::new(2.0, 0.0, 0.0, 0.0), 0.5, vec![])
            .unwrap();
        assert_eq!(g.scale.x, MIN_SCALE);
        assert_eq!(g.rotation, Quat::identity());
    }

    proptest! {
        #[test]
        fn kernel_decreases_along_rays(
            dir in prop::array::uniform3(-1.0f64..1.0),
            s in prop::array::uniform3(0.1f64..2.0),
            t in 0.0f64..3.0,
        ) {
            let d = Vec3::from(dir);
            prop_assume!(d.norm() > 1e-3);
            let g = prim([0.5, 0.1, -0.2], s, Quat::from_axis_angle(&Vec3::x(), 0.3));
            let a = g.kernel(&(g.mean + d * t));
            let b = g.kernel(&(g.mean + d * (t + 0.1)));
            prop_assert!(b <= a);
        }

        #[test]
        fn density_is_centrally_symmetric(off in prop::array::uniform3(-2.0f64..2.0)) {
            let g = prim([0.5, 0.1, -0.2], [0.4, 0.9, 1.3], Quat::from_axis_angle(&Vec3::y(), 1.0));
            let x = g.mean + Vec3::from(off);
            let mirrored = g.mean * 2.0 - x;
            prop_assert!((g.density(&x) - g.density(&mirrored)).abs() < 1e-15);
        }
    }
}
