//! Gaussian-to-voxel splatting.
//!
//! Each voxel center `x` gathers the primitives of its neighborhood `N(x)`
//! and evaluates
//!
//! ```text
//! α(x)   = 1 - Π (1 - kernel_i(x) · a_i)
//! e_l(x) = Σ p_i(x) · softmax(c_i)_l / Σ p_j(x)
//! V_l    = α(x) · e_l(x),   V_empty = 1 - α(x)
//! ```
//!
//! `N(x)` is the bucket of the [`SpatialIndex`] cell containing `x`: every
//! primitive whose truncated (k·σ) axis-aligned box overlaps that cell. With
//! truncation disabled the neighborhood is the whole primitive set.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::gaussian::{GaussianKernel, GaussianPrimitive, DEFAULT_CLASSES};
use crate::geometry::Vec3;
use crate::grid::{GridGeometry, VoxelGrid};
use crate::scalar::Real;

pub const DEFAULT_TRUNCATION_SIGMAS: f64 = 3.0;
/// Index cell size as a multiple of the voxel size.
pub const DEFAULT_CELL_FACTOR: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Truncation<T> {
    /// Support cut at this many standard deviations per axis.
    Sigmas(T),
    /// Every primitive contributes everywhere.
    Disabled,
}

impl<T: Real> Default for Truncation<T> {
    fn default() -> Self {
        Truncation::Sigmas(T::lit(DEFAULT_TRUNCATION_SIGMAS))
    }
}

/// Uniform hash grid from integer cells to the primitives whose truncated
/// support box overlaps them.
#[derive(Clone, Debug)]
pub struct SpatialIndex<T: Real> {
    cell_size: T,
    truncation: Truncation<T>,
    buckets: HashMap<[i64; 3], Vec<u32>>,
    all: Vec<u32>,
}

impl<T: Real> SpatialIndex<T> {
    pub fn build(primitives: &[GaussianPrimitive<T>], cell_size: T, truncation: Truncation<T>) -> Result<Self> {
        let kernels: Vec<_> = primitives.iter().map(GaussianKernel::new).collect();
        Self::from_kernels(&kernels, cell_size, truncation)
    }

    pub fn from_kernels(kernels: &[GaussianKernel<T>], cell_size: T, truncation: Truncation<T>) -> Result<Self> {
        if !cell_size.finite() || cell_size <= T::zero() {
            return invalid(format!("index cell size must be > 0, got {cell_size}"));
        }
        if kernels.len() > u32::MAX as usize {
            return invalid("too many primitives for index");
        }
        let all: Vec<u32> = (0..kernels.len() as u32).collect();
        let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        if let Truncation::Sigmas(k) = truncation {
            if !k.finite() || k <= T::zero() {
                return invalid("truncation radius must be positive");
            }
            for (id, kern) in kernels.iter().enumerate() {
                let half = kern.axis_sigma * k;
                let lo = cell_index(&(kern.mean - half), cell_size);
                let hi = cell_index(&(kern.mean + half), cell_size);
                for cz in lo[2]..=hi[2] {
                    for cy in lo[1]..=hi[1] {
                        for cx in lo[0]..=hi[0] {
                            buckets.entry([cx, cy, cz]).or_default().push(id as u32);
                        }
                    }
                }
            }
        }
        Ok(Self { cell_size, truncation, buckets, all })
    }

    pub fn cell_size(&self) -> T {
        self.cell_size
    }

    pub fn truncation(&self) -> Truncation<T> {
        self.truncation
    }

    pub fn len(&self) -> usize {
        self.all.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all.is_empty()
    }

    /// Candidate primitive ids for a point, in ascending id order.
    pub fn query(&self, p: &Vec3<T>) -> &[u32] {
        match self.truncation {
            Truncation::Disabled => &self.all,
            Truncation::Sigmas(_) => self
                .buckets
                .get(&cell_index(p, self.cell_size))
                .map(Vec::as_slice)
                .unwrap_or(&[]),
        }
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }
}

#[inline]
fn cell_index<T: Real>(p: &Vec3<T>, cell: T) -> [i64; 3] {
    [
        (p.x / cell).floor().as_f64() as i64,
        (p.y / cell).floor().as_f64() as i64,
        (p.z / cell).floor().as_f64() as i64,
    ]
}

/// Builds the index used by [`render`] for a grid: cell size defaults to
/// four voxels.
pub fn build_index<T: Real>(primitives: &[GaussianPrimitive<T>], cell_size: T) -> Result<SpatialIndex<T>> {
    SpatialIndex::build(primitives, cell_size, Truncation::default())
}

struct Prepared<T: Real> {
    kernel: GaussianKernel<T>,
    opacity: T,
    probs: Vec<T>,
}

fn prepare<T: Real>(primitives: &[GaussianPrimitive<T>]) -> Vec<Prepared<T>> {
    primitives
        .par_iter()
        .map(|g| Prepared { kernel: GaussianKernel::new(g), opacity: g.opacity, probs: g.class_probs() })
        .collect()
}

/// Per-voxel result of the splatting kernels.
struct VoxelSample<T> {
    alpha: T,
    /// `None` when the neighborhood carries zero total density.
    semantic_weight: Option<T>,
    confidence: T,
}

fn sample_voxel<T: Real>(
    x: &Vec3<T>,
    ids: &[u32],
    prepared: &[Prepared<T>],
    confidence: Option<&[T]>,
    semantics: &mut [T],
) -> VoxelSample<T> {
    let mut transmittance = T::one();
    let mut total = T::zero();
    let mut conf_acc = T::zero();
    semantics.iter_mut().for_each(|s| *s = T::zero());
    for &id in ids {
        let p = &prepared[id as usize];
        let k = p.kernel.kernel(x);
        transmittance *= T::one() - k * p.opacity;
        let dens = p.kernel.norm * k;
        if dens > T::zero() {
            total += dens;
            for (s, &c) in semantics.iter_mut().zip(&p.probs) {
                *s += dens * c;
            }
            if let Some(conf) = confidence {
                conf_acc += dens * conf[id as usize];
            }
        }
    }
    let alpha = (T::one() - transmittance).max(T::zero()).min(T::one());
    if total > T::zero() {
        semantics.iter_mut().for_each(|s| *s /= total);
        VoxelSample { alpha, semantic_weight: Some(total), confidence: conf_acc / total }
    } else {
        let uniform = T::one() / T::of_usize(semantics.len());
        semantics.iter_mut().for_each(|s| *s = uniform);
        VoxelSample { alpha, semantic_weight: None, confidence: T::zero() }
    }
}

/// Opacity field `α(x)` at every voxel center.
pub fn splat_opacity<T: Real>(
    geometry: &GridGeometry<T>,
    primitives: &[GaussianPrimitive<T>],
    index: &SpatialIndex<T>,
) -> Vec<T> {
    let prepared = prepare(primitives);
    (0..geometry.len())
        .into_par_iter()
        .map(|idx| {
            let x = geometry.center_of(idx);
            let mut t = T::one();
            for &id in index.query(&x) {
                let p = &prepared[id as usize];
                t *= T::one() - p.kernel.kernel(&x) * p.opacity;
            }
            (T::one() - t).max(T::zero()).min(T::one())
        })
        .collect()
}

/// Semantic field `e(x)` over the occupied classes.
#[derive(Clone, Debug)]
pub struct SemanticField<T> {
    pub classes: usize,
    /// `classes - 1` values per voxel.
    pub values: Vec<T>,
    /// Voxels with zero total density; their semantics are uniform.
    pub undefined: Vec<bool>,
}

pub fn splat_semantics<T: Real>(
    geometry: &GridGeometry<T>,
    primitives: &[GaussianPrimitive<T>],
    index: &SpatialIndex<T>,
    classes: usize,
) -> Result<SemanticField<T>> {
    check_classes(primitives, classes)?;
    let prepared = prepare(primitives);
    let occ = classes - 1;
    let mut values = vec![T::zero(); geometry.len() * occ];
    let undefined: Vec<bool> = values
        .par_chunks_mut(occ)
        .enumerate()
        .map(|(idx, sem)| {
            let x = geometry.center_of(idx);
            sample_voxel(&x, index.query(&x), &prepared, None, sem).semantic_weight.is_none()
        })
        .collect();
    Ok(SemanticField { classes, values, undefined })
}

#[derive(Clone, Debug)]
pub struct RenderOptions<T: Real> {
    /// Class count including empty.
    pub classes: usize,
    pub truncation: Truncation<T>,
    /// Index cell size; `None` means four voxels.
    pub cell_size: Option<T>,
    /// Per-primitive auxiliary confidence `c′`, rendered as a density-weighted
    /// average into an extra channel.
    pub confidence: Option<Vec<T>>,
}

impl<T: Real> Default for RenderOptions<T> {
    fn default() -> Self {
        Self { classes: DEFAULT_CLASSES, truncation: Truncation::default(), cell_size: None, confidence: None }
    }
}

impl<T: Real> RenderOptions<T> {
    pub fn dense(classes: usize) -> Self {
        Self { classes, truncation: Truncation::Disabled, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput<T: Real> {
    pub grid: VoxelGrid<T>,
    /// Rendered confidence channel when requested.
    pub confidence: Option<Vec<T>>,
    /// Voxels whose neighborhood had zero total density.
    pub undefined_semantics: Vec<bool>,
}

fn check_classes<T: Real>(primitives: &[GaussianPrimitive<T>], classes: usize) -> Result<()> {
    if classes < 2 {
        return invalid("need at least one occupied class");
    }
    if let Some((i, g)) = primitives.iter().enumerate().find(|(_, g)| g.logits.len() != classes - 1) {
        return invalid(format!("primitive {i} has {} logits, expected {}", g.logits.len(), classes - 1));
    }
    Ok(())
}

/// Renders primitives into per-voxel probabilities `(α e_1, …, α e_{C-1}, 1 - α)`.
pub fn render<T: Real>(
    geometry: &GridGeometry<T>,
    primitives: &[GaussianPrimitive<T>],
    options: &RenderOptions<T>,
) -> Result<RenderOutput<T>> {
    let classes = options.classes;
    check_classes(primitives, classes)?;
    if let Some(c) = &options.confidence {
        if c.len() != primitives.len() {
            return invalid(format!("{} confidences for {} primitives", c.len(), primitives.len()));
        }
    }
    let cell = options.cell_size.unwrap_or(geometry.voxel_size * T::lit(DEFAULT_CELL_FACTOR));
    let prepared = prepare(primitives);
    let kernels: Vec<_> = prepared.iter().map(|p| p.kernel.clone()).collect();
    let index = SpatialIndex::from_kernels(&kernels, cell, options.truncation)?;
    drop(kernels);

    let n = geometry.len();
    let mut data = vec![T::zero(); n * classes];
    let conf = options.confidence.as_deref();
    let (undefined, conf_channel): (Vec<bool>, Vec<T>) = data
        .par_chunks_mut(classes)
        .enumerate()
        .map(|(idx, out)| {
            let x = geometry.center_of(idx);
            let (sem, empty) = out.split_at_mut(classes - 1);
            let s = sample_voxel(&x, index.query(&x), &prepared, conf, sem);
            sem.iter_mut().for_each(|v| *v *= s.alpha);
            empty[0] = T::one() - s.alpha;
            (s.semantic_weight.is_none(), s.confidence)
        })
        .unzip();
    Ok(RenderOutput {
        grid: VoxelGrid::from_probabilities(geometry.clone(), classes, data)?,
        confidence: options.confidence.as_ref().map(|_| conf_channel),
        undefined_semantics: undefined,
    })
}

/// Per-voxel argmax label. Ties resolve to the lower channel index, so the
/// trailing empty channel loses every tie.
pub fn argmax_labels<T: Real>(grid: &VoxelGrid<T>) -> Result<VoxelGrid<T>> {
    let Some(p) = grid.probabilities() else {
        return invalid("argmax_labels needs a probability grid");
    };
    let labels = p
        .par_chunks(grid.classes)
        .map(|ch| {
            let mut best = 0;
            for (i, &v) in ch.iter().enumerate() {
                if v > ch[best] {
                    best = i;
                }
            }
            best as u16
        })
        .collect();
    VoxelGrid::from_labels(grid.geometry.clone(), grid.classes, labels)
}
