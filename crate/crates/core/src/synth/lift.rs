//! Depth-guided lifting of sampled pixels into initial Gaussians.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraFrame;
use crate::gaussian::{GaussianPrimitive, DEFAULT_CLASSES};
use crate::geometry::{Quat, Vec3};
use crate::scalar::Real;
use crate::synth::depth::DepthImage;

#[derive(Clone, Debug, PartialEq)]
pub struct LiftOptions {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Initial isotropic scale, normally the ground-truth voxel size.
    pub scale: f64,
    pub classes: usize,
    /// Seeded random rotations and opacities instead of the neutral values.
    pub randomize: Option<u64>,
}

impl Default for LiftOptions {
    fn default() -> Self {
        Self { grid_h: 30, grid_w: 40, scale: 0.08, classes: DEFAULT_CLASSES, randomize: None }
    }
}

/// Pixels of a uniform `grid_h × grid_w` sampling pattern, row-major.
pub fn sample_pixels(width: u32, height: u32, grid_h: usize, grid_w: usize) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for i in 0..grid_h {
        let py = (((i as f64 + 0.5) * height as f64 / grid_h as f64) as u32).min(height - 1);
        for j in 0..grid_w {
            let px = (((j as f64 + 0.5) * width as f64 / grid_w as f64) as u32).min(width - 1);
            out.push((px, py));
        }
    }
    out
}

/// World point at camera depth `d` behind image position `(u, v)`.
pub fn lift_point<T: Real>(frame: &CameraFrame<T>, u: T, v: T, d: T) -> Vec3<T> {
    frame.center() + frame.pixel_direction(u, v) * d
}

/// World point seen through the center of pixel `(px, py)` at camera depth `d`.
pub fn lift_pixel<T: Real>(frame: &CameraFrame<T>, px: u32, py: u32, d: T) -> Vec3<T> {
    let h = T::lit(0.5);
    lift_point(frame, T::of_usize(px as usize) + h, T::of_usize(py as usize) + h, d)
}

/// Lifts every finite-depth sample to a Gaussian with neutral attributes:
/// voxel-sized scale, identity rotation, opacity 0.5 and uniform logits.
pub fn lift<T: Real>(depth: &DepthImage<T>, frame: &CameraFrame<T>, opts: &LiftOptions) -> Vec<GaussianPrimitive<T>> {
    let mut rng = opts.randomize.map(ChaCha8Rng::seed_from_u64);
    sample_pixels(depth.width, depth.height, opts.grid_h, opts.grid_w)
        .into_iter()
        .filter_map(|(px, py)| {
            let d = depth.at(px, py);
            if !d.finite() || d <= T::zero() {
                return None;
            }
            let mean = lift_pixel(frame, px, py, d);
            let (rotation, opacity) = match rng.as_mut() {
                None => (Quat::identity(), T::lit(0.5)),
                Some(r) => {
                    let q = Quat::new(
                        T::lit(r.random::<f64>() - 0.5),
                        T::lit(r.random::<f64>() - 0.5),
                        T::lit(r.random::<f64>() - 0.5),
                        T::lit(r.random::<f64>() - 0.5),
                    );
                    (q.normalized().unwrap_or_else(|_| Quat::identity()), T::lit(r.random::<f64>()))
                }
            };
            Some(GaussianPrimitive {
                mean,
                scale: Vec3::repeat(T::lit(opts.scale)),
                rotation,
                opacity,
                logits: vec![T::zero(); opts.classes - 1],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::depth::render_depth;
    use crate::synth::scene::{generate_scene, SceneSpec};

    #[test]
    fn principal_point_lifts_along_axis() {
        let f = CameraFrame::look_at(Vec3::new(0.2, 0.3, 1.0), Vec3::new(1.0, 1.0, 0.5), Vec3::z()).unwrap();
        let p = lift_point(&f, 320.0, 240.0, 2.5);
        let expected = f.center() + f.optical_axis() * 2.5;
        assert!((p - expected).norm() < 1e-12);
    }

    #[test]
    fn sampling_grid_shape() {
        let px = sample_pixels(640, 480, 30, 40);
        assert_eq!(px.len(), 1200);
        assert_eq!(px[0], (8, 8));
        assert_eq!(px[1199], (632, 472));
    }

    #[test]
    fn lift_round_trip_within_half_pixel() {
        let spec = SceneSpec::default_room();
        let g = generate_scene::<f64>(&spec).unwrap();
        let f = CameraFrame::look_at(Vec3::new(2.4, 1.0, 1.5), Vec3::new(2.4, 4.0, 0.6), Vec3::z()).unwrap();
        let d = render_depth(&g, &f);
        let prims = lift(&d, &f, &LiftOptions::default());
        assert!(!prims.is_empty() && prims.len() <= 1200);
        let pixels = sample_pixels(640, 480, 30, 40);
        let finite: Vec<_> = pixels.iter().filter(|&&(x, y)| d.at(x, y).is_finite()).collect();
        assert_eq!(finite.len(), prims.len());
        for (g, &&(x, y)) in prims.iter().zip(&finite) {
            let p = f.project(&g.mean).unwrap();
            assert!((p.u - (x as f64 + 0.5)).abs() <= 0.5 && (p.v - (y as f64 + 0.5)).abs() <= 0.5);
            assert_eq!(g.opacity, 0.5);
            assert!(g.logits.iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn infinite_depth_lifts_nothing() {
        let f = CameraFrame::<f64>::look_at(Vec3::zeros(), Vec3::x(), Vec3::z()).unwrap();
        let d = DepthImage { width: 640, height: 480, depths: vec![f64::INFINITY; 640 * 480], blocked: false };
        assert!(lift(&d, &f, &LiftOptions::default()).is_empty());
    }

    #[test]
    fn randomized_mode_is_seeded() {
        let f = CameraFrame::<f64>::look_at(Vec3::zeros(), Vec3::x(), Vec3::z()).unwrap();
        let d = DepthImage { width: 640, height: 480, depths: vec![2.0; 640 * 480], blocked: false };
        let opts = LiftOptions { randomize: Some(3), ..Default::default() };
        let a = lift(&d, &f, &opts);
        assert_eq!(a, lift(&d, &f, &opts));
        assert!(a.iter().any(|g| g.rotation != Quat::identity()));
    }
}
