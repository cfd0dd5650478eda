//! Camera trajectories that sweep a room from free space.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraFrame;
use crate::error::{invalid, Result};
use crate::geometry::Vec3;
use crate::grid::VoxelGrid;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryOptions {
    /// Orbit radius as a fraction of the smaller horizontal half-extent.
    pub radius_fraction: f64,
    pub height: f64,
    /// Downward pitch of the view, radians.
    pub pitch: f64,
    /// Even frames look this much further down, odd frames this much higher.
    pub pitch_swing: f64,
    /// Fraction of a full turn covered by the episode.
    pub sweep: f64,
    /// Random perturbation of position (meters) and yaw (radians).
    pub jitter: f64,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self { radius_fraction: 0.5, height: 1.5, pitch: 0.25, pitch_swing: 0.3, sweep: 1.0, jitter: 0.05 }
    }
}

/// Cameras on a jittered orbit around the room center, each looking across
/// the room toward the far side. Positions inside occupied voxels are
/// resampled.
pub fn generate_trajectory<T: Real>(
    gt: &VoxelGrid<T>,
    n_frames: usize,
    seed: u64,
    opts: &TrajectoryOptions,
) -> Result<Vec<CameraFrame<T>>> {
    if n_frames == 0 {
        return invalid("trajectory needs at least one frame");
    }
    let Some(labels) = gt.labels() else {
        return invalid("trajectory needs a label-mode grid");
    };
    let geom = &gt.geometry;
    let lo = geom.origin.map(|v| v.as_f64());
    let hi = geom.max_corner().map(|v| v.as_f64());
    let mid = (lo + hi) * 0.5;
    let radius = opts.radius_fraction * 0.5 * (hi.x - lo.x).min(hi.y - lo.y);
    let free = |p: &Vec3<f64>| {
        let q = p.map(T::lit);
        match geom.locate(&q) {
            Some([i, j, k]) => labels[geom.index(i, j, k)] == gt.empty_label(),
            None => false,
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.random::<f64>() * TAU;
    let mut frames = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let theta = phase + opts.sweep * TAU * f as f64 / n_frames as f64;
        let mut found = None;
        for _ in 0..64 {
            let j = |r: &mut ChaCha8Rng| (r.random::<f64>() * 2.0 - 1.0) * opts.jitter;
            let eye = Vec3::new(
                mid.x + radius * theta.cos() + j(&mut rng),
                mid.y + radius * theta.sin() + j(&mut rng),
                lo.z + opts.height + j(&mut rng),
            );
            if free(&eye) {
                // look across the room, past the center
                let yaw = theta + std::f64::consts::PI + j(&mut rng);
                let pitch = if f % 2 == 0 { opts.pitch + opts.pitch_swing } else { opts.pitch - opts.pitch_swing };
                let dir = Vec3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), -pitch.sin());
                found = Some((eye, eye + dir));
                break;
            }
        }
        let Some((eye, target)) = found else {
            return invalid(format!("no free camera position found for frame {f}"));
        };
        frames.push(CameraFrame::look_at(eye.map(T::lit), target.map(T::lit), Vec3::z())?);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::{generate_scene, BoxSpec, SceneSpec};

    #[test]
    fn single_frame_and_free_positions() {
        let g = generate_scene::<f64>(&SceneSpec::default_room()).unwrap();
        assert_eq!(generate_trajectory(&g, 1, 0, &TrajectoryOptions::default()).unwrap().len(), 1);
        let frames = generate_trajectory(&g, 30, 3, &TrajectoryOptions::default()).unwrap();
        let labels = g.labels().unwrap();
        for f in &frames {
            let [i, j, k] = g.geometry.locate(&f.center()).unwrap();
            assert_eq!(labels[g.geometry.index(i, j, k)], g.empty_label());
        }
        assert_eq!(frames, generate_trajectory(&g, 30, 3, &TrajectoryOptions::default()).unwrap());
        assert!(generate_trajectory(&g, 0, 3, &TrajectoryOptions::default()).is_err());
    }

    #[test]
    fn solid_scene_has_no_free_space() {
        let spec = SceneSpec {
            extent: [1.0, 1.0, 2.0],
            gt_voxel_size: 0.1,
            seed: 0,
            classes: 12,
            boxes: vec![BoxSpec { min: [0.0; 3], max: [1.0, 1.0, 2.0], class: 2 }],
        };
        let g = generate_scene::<f64>(&spec).unwrap();
        assert!(generate_trajectory(&g, 3, 0, &TrajectoryOptions::default()).is_err());
    }
}
