//! Synthetic stand-in for the perception stack: voxel scenes, ray-cast
//! depth, the depth-guided lifter, camera trajectories and a noisy local
//! predictor.

pub mod depth;
pub mod lift;
pub mod scene;
pub mod stub;
pub mod trajectory;

pub use depth::{cast_ray, render_depth, DepthImage, RayHit};
pub use lift::{lift, lift_pixel, lift_point, sample_pixels, LiftOptions};
pub use scene::{generate_scene, BoxSpec, SceneSpec, CLASS_NAMES};
pub use stub::{stub_predict, NoiseConfig, StubOptions};
pub use trajectory::{generate_trajectory, TrajectoryOptions};
