//! Depth images by voxel ray traversal.
//!
//! Rays are parameterized by camera depth: a ray through pixel `(u, v)`
//! reaches `center + t * pixel_direction(u, v)`, so `t` is the z-depth the
//! lifter expects.

use rayon::prelude::*;

use crate::camera::CameraFrame;
use crate::geometry::Vec3;
use crate::grid::{GridGeometry, VoxelGrid};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage<T> {
    pub width: u32,
    pub height: u32,
    /// Row-major camera depths; `INFINITY` where nothing was hit.
    pub depths: Vec<T>,
    /// Set when the camera sits inside an occupied voxel; every depth is 0.
    pub blocked: bool,
}

impl<T: Real> DepthImage<T> {
    pub fn at(&self, px: u32, py: u32) -> T {
        self.depths[(py * self.width + px) as usize]
    }

    pub fn finite_count(&self) -> usize {
        self.depths.iter().filter(|d| d.finite()).count()
    }
}

/// First occupied voxel along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit<T> {
    pub depth: T,
    pub voxel: [usize; 3],
    /// Face through which the ray entered the voxel, as `(axis, step sign)`;
    /// `None` when the ray starts inside it.
    pub entry: Option<(usize, i64)>,
}

impl<T: Real> RayHit<T> {
    /// Unit vector pointing from the entry face into the voxel.
    pub fn inward_normal(&self) -> Option<Vec3<T>> {
        self.entry.map(|(axis, sign)| {
            let mut n = Vec3::zeros();
            n[axis] = if sign > 0 { T::one() } else { -T::one() };
            n
        })
    }
}

fn occupied(grid: &VoxelGrid<impl Real>, labels: &[u16], c: [usize; 3]) -> bool {
    labels[grid.geometry.index(c[0], c[1], c[2])] != grid.empty_label()
}

/// Amanatides–Woo traversal from `origin` along `dir` up to parameter
/// `t_max`. `dir` need not be normalized; the returned depth is in units
/// of the ray parameter.
pub fn cast_ray<T: Real>(grid: &VoxelGrid<T>, origin: &Vec3<T>, dir: &Vec3<T>, t_max: T) -> Option<RayHit<T>> {
    let labels = grid.labels()?;
    let geom: &GridGeometry<T> = &grid.geometry;
    let lo = geom.origin;
    let hi = geom.max_corner();

    // slab clip against the grid box
    let mut t_enter = T::zero();
    let mut t_exit = t_max;
    let mut enter_axis = None;
    for a in 0..3 {
        if dir[a] == T::zero() {
            if origin[a] < lo[a] || origin[a] >= hi[a] {
                return None;
            }
            continue;
        }
        let inv = T::one() / dir[a];
        let (mut t0, mut t1) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            enter_axis = Some(a);
        }
        t_exit = t_exit.min(t1);
    }
    if t_enter > t_exit {
        return None;
    }

    let step: [i64; 3] = std::array::from_fn(|a| {
        if dir[a] > T::zero() {
            1
        } else if dir[a] < T::zero() {
            -1
        } else {
            0
        }
    });
    let p = origin + dir * t_enter;
    let mut cell = geom.cell_of(&p);
    for (c, &d) in cell.iter_mut().zip(&geom.dims) {
        *c = (*c).clamp(0, d as i64 - 1);
    }
    if let Some(a) = enter_axis {
        // the entry plane sits on a boundary; take the voxel on the far side
        cell[a] = if step[a] > 0 { 0 } else { geom.dims[a] as i64 - 1 };
    }

    let h = geom.voxel_size;
    let mut t_next = [T::zero(); 3];
    let mut t_delta = [T::zero(); 3];
    for a in 0..3 {
        if step[a] == 0 {
            t_next[a] = T::max_value().unwrap_or(t_max + T::one());
            t_delta[a] = t_next[a];
        } else {
            let boundary = lo[a] + T::lit((cell[a] + i64::from(step[a] > 0)) as f64) * h;
            t_next[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = h / dir[a].abs();
        }
    }

    let mut t = t_enter;
    let mut entry = enter_axis.map(|a| (a, step[a]));
    loop {
        let c = [cell[0] as usize, cell[1] as usize, cell[2] as usize];
        if occupied(grid, labels, c) {
            return Some(RayHit { depth: t, voxel: c, entry });
        }
        let a = (0..3).fold(0, |best, a| if t_next[a] < t_next[best] { a } else { best });
        t = t_next[a];
        if t > t_exit {
            return None;
        }
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= geom.dims[a] as i64 {
            return None;
        }
        t_next[a] += t_delta[a];
        entry = Some((a, step[a]));
    }
}

/// Ray cast through the center of pixel `(px, py)`.
pub fn cast_pixel<T: Real>(grid: &VoxelGrid<T>, frame: &CameraFrame<T>, px: u32, py: u32) -> Option<RayHit<T>> {
    let h = T::lit(0.5);
    let dir = frame.pixel_direction(T::of_usize(px as usize) + h, T::of_usize(py as usize) + h);
    cast_ray(grid, &frame.center(), &dir, frame.far)
}

/// Camera depth to the first occupied voxel for every pixel.
pub fn render_depth<T: Real>(grid: &VoxelGrid<T>, frame: &CameraFrame<T>) -> DepthImage<T> {
    render_depth_pixels(grid, frame, None)
}

/// As [`render_depth`], tracing only the listed pixels; others stay infinite.
pub fn render_depth_pixels<T: Real>(
    grid: &VoxelGrid<T>,
    frame: &CameraFrame<T>,
    pixels: Option<&[(u32, u32)]>,
) -> DepthImage<T> {
    let (w, hgt) = (frame.width, frame.height);
    let inf = T::lit(f64::INFINITY);
    let blocked = grid
        .geometry
        .locate(&frame.center())
        .is_some_and(|c| grid.labels().is_some_and(|l| occupied(grid, l, c)));
    if blocked {
        return DepthImage { width: w, height: hgt, depths: vec![T::zero(); (w * hgt) as usize], blocked };
    }
    let depth_of = |px: u32, py: u32| cast_pixel(grid, frame, px, py).map_or(inf, |hit| hit.depth);
    let depths = match pixels {
        None => (0..w * hgt).into_par_iter().map(|i| depth_of(i % w, i / w)).collect(),
        Some(list) => {
            let mut d = vec![inf; (w * hgt) as usize];
            for &(px, py) in list {
                d[(py * w + px) as usize] = depth_of(px, py);
            }
            d
        }
    };
    DepthImage { width: w, height: hgt, depths, blocked }
}
