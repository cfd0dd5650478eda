//! Semantic occupancy from 3D Gaussian primitives with a persistent,
//! confidence-aware Gaussian memory.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which is what the pipeline and the binary
//! formats are exercised with.

// `!(a < b)` is how NaN inputs get rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attn;
pub mod batch;
pub mod camera;
pub mod cavf;
pub mod conf;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod geometry;
pub mod grid;
pub mod loss;
pub mod memory;
pub mod pipeline;
pub mod scalar;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Gaussian = gaussian::GaussianPrimitive<f64>;
pub type Batch = batch::PrimitiveBatch<f64>;
pub type Camera = camera::CameraFrame<f64>;
pub type Geometry = grid::GridGeometry<f64>;
pub type Grid = grid::VoxelGrid<f64>;
pub type Vec3 = geometry::Vec3<f64>;
pub type Quat = geometry::Quat<f64>;
