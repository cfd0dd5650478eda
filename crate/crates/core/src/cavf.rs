//! Confidence-aware voxel fusion.
//!
//! Primitives are grouped by the fusion cell containing their mean. Inside a
//! cell the merge weights are a softmax of confidence over temperature, and
//! every attribute and feature of the merged primitive is the weighted sum
//! of the members. Quaternions are sign-aligned to the heaviest member before
//! summation and renormalized afterwards.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::batch::PrimitiveBatch;
use crate::error::{invalid, Result};
use crate::gaussian::GaussianPrimitive;
use crate::geometry::{Quat, Vec3};
use crate::scalar::Real;

/// Integer fusion cell.
pub type Cell = [i64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginPolicy {
    /// Cells anchored at the world origin, stable across frames.
    WorldZero,
    /// Cells anchored at the componentwise minimum of the input means.
    SceneMin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub voxel_size: f64,
    pub temperature: f64,
    pub grid_origin_policy: OriginPolicy,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { voxel_size: 0.12, temperature: 1.0, grid_origin_policy: OriginPolicy::WorldZero }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return invalid(format!("fusion.voxel_size must be > 0, got {}", self.voxel_size));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return invalid(format!("fusion.temperature must be > 0, got {}", self.temperature));
        }
        Ok(())
    }

    /// Cell origin implied by the policy for this primitive set.
    pub fn origin<T: Real>(&self, primitives: &[GaussianPrimitive<T>]) -> Vec3<T> {
        match self.grid_origin_policy {
            OriginPolicy::WorldZero => Vec3::zeros(),
            OriginPolicy::SceneMin => primitives
                .iter()
                .map(|g| g.mean)
                .reduce(|a, b| a.inf(&b))
                .unwrap_or_else(Vec3::zeros),
        }
    }
}

/// `floor((μ - origin) / voxel_size)` componentwise.
#[inline]
pub fn cell_of<T: Real>(mean: &Vec3<T>, origin: &Vec3<T>, voxel_size: T) -> Cell {
    let r = (mean - origin) / voxel_size;
    [r.x.floor().as_f64() as i64, r.y.floor().as_f64() as i64, r.z.floor().as_f64() as i64]
}

pub fn assign_voxels<T: Real>(primitives: &[GaussianPrimitive<T>], cfg: &FusionConfig) -> Vec<Cell> {
    let origin = cfg.origin(primitives);
    assign_voxels_from(primitives, &origin, T::lit(cfg.voxel_size))
}

pub fn assign_voxels_from<T: Real>(primitives: &[GaussianPrimitive<T>], origin: &Vec3<T>, voxel_size: T) -> Vec<Cell> {
    primitives.iter().map(|g| cell_of(&g.mean, origin, voxel_size)).collect()
}

/// Member indices per cell, cells in ascending order, members in input order.
pub fn group_by_cell(cells: &[Cell]) -> BTreeMap<Cell, Vec<usize>> {
    let mut groups: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
    for (i, c) in cells.iter().enumerate() {
        groups.entry(*c).or_default().push(i);
    }
    groups
}

/// Per-cell softmax of `confidence / temperature`.
pub fn fusion_weights<T: Real>(confidences: &[T], cells: &[Cell], temperature: T) -> Result<Vec<T>> {
    if confidences.len() != cells.len() {
        return invalid(format!("{} confidences for {} cells", confidences.len(), cells.len()));
    }
    if !(temperature > T::zero()) {
        return invalid("fusion temperature must be > 0");
    }
    let mut weights = vec![T::zero(); cells.len()];
    for members in group_by_cell(cells).values() {
        let max = members.iter().map(|&i| confidences[i]).fold(confidences[members[0]], |m, c| m.max(c));
        let mut sum = T::zero();
        for &i in members {
            let e = ((confidences[i] - max) / temperature).exp();
            weights[i] = e;
            sum += e;
        }
        for &i in members {
            weights[i] /= sum;
        }
    }
    Ok(weights)
}

#[derive(Clone, Debug)]
pub struct Fused<T: Real> {
    pub primitives: Vec<GaussianPrimitive<T>>,
    pub features: DMatrix<T>,
    /// Cell of each output, strictly ascending.
    pub cells: Vec<Cell>,
    /// Outputs whose weighted quaternion sum vanished and fell back to the
    /// heaviest member's rotation.
    pub degenerate_rotation: Vec<bool>,
}

/// Merges each cell's members by convex combination with `weights`.
pub fn fuse<T: Real>(
    primitives: &[GaussianPrimitive<T>],
    features: &DMatrix<T>,
    weights: &[T],
    cells: &[Cell],
) -> Result<Fused<T>> {
    let n = primitives.len();
    if features.nrows() != n || weights.len() != n || cells.len() != n {
        return invalid("fuse inputs must have equal lengths");
    }
    let groups = group_by_cell(cells);
    let d = features.ncols();
    let mut out = Vec::with_capacity(groups.len());
    let mut out_cells = Vec::with_capacity(groups.len());
    let mut flags = Vec::with_capacity(groups.len());
    let mut feats = DMatrix::zeros(groups.len(), d);

    for (row, (cell, members)) in groups.iter().enumerate() {
        let lead = members
            .iter()
            .copied()
            .fold(members[0], |best, i| if weights[i] > weights[best] { i } else { best });
        let reference = primitives[lead].rotation;
        let n_logits = primitives[lead].logits.len();

        let mut mean = Vec3::zeros();
        let mut scale = Vec3::zeros();
        let mut quat = Quat([T::zero(); 4]);
        let mut opacity = T::zero();
        let mut logits = vec![T::zero(); n_logits];
        for &i in members {
            let g = &primitives[i];
            if g.logits.len() != n_logits {
                return invalid("primitives in one cell disagree on class count");
            }
            let w = weights[i];
            mean += g.mean * w;
            scale += g.scale * w;
            let aligned = if g.rotation.dot(&reference) < T::zero() { g.rotation.neg() } else { g.rotation };
            quat = quat.add(&aligned.scaled(w));
            opacity += g.opacity * w;
            for (acc, &c) in logits.iter_mut().zip(&g.logits) {
                *acc += c * w;
            }
            for c in 0..d {
                feats[(row, c)] += features[(i, c)] * w;
            }
        }
        let degenerate = quat.norm() < T::lit(1e-8);
        let rotation = if degenerate { reference } else { quat.normalized()? };
        out.push(GaussianPrimitive {
            mean,
            scale,
            rotation,
            opacity: opacity.max(T::zero()).min(T::one()),
            logits,
        });
        out_cells.push(*cell);
        flags.push(degenerate);
    }
    Ok(Fused { primitives: out, features: feats, cells: out_cells, degenerate_rotation: flags })
}

/// Groups a batch with a fixed cell origin, fuses it and recomputes nothing:
/// output confidences are the weighted sums of member confidences.
pub fn fuse_batch_from<T: Real>(
    batch: &PrimitiveBatch<T>,
    origin: &Vec3<T>,
    cfg: &FusionConfig,
) -> Result<(PrimitiveBatch<T>, Vec<Cell>)> {
    let cells = assign_voxels_from(&batch.primitives, origin, T::lit(cfg.voxel_size));
    let weights = fusion_weights(&batch.confidences, &cells, T::lit(cfg.temperature))?;
    let fused = fuse(&batch.primitives, &batch.features, &weights, &cells)?;
    let mut conf = vec![T::zero(); fused.cells.len()];
    for (row, members) in group_by_cell(&cells).values().enumerate() {
        conf[row] = members
            .iter()
            .fold(T::zero(), |a, &i| a + weights[i] * batch.confidences[i])
            .max(T::zero())
            .min(T::one());
    }
    Ok((PrimitiveBatch::new(fused.primitives, fused.features, conf)?, fused.cells))
}

pub fn fuse_batch<T: Real>(batch: &PrimitiveBatch<T>, cfg: &FusionConfig) -> Result<(PrimitiveBatch<T>, Vec<Cell>)> {
    let origin = cfg.origin(&batch.primitives);
    fuse_batch_from(batch, &origin, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64, y: f64, z: f64) -> GaussianPrimitive<f64> {
        GaussianPrimitive::isotropic(Vec3::new(x, y, z), 0.05, 0.8, vec![0.5, -0.2]).unwrap()
    }

    #[test]
    fn cell_assignment_examples() {
        let cfg = FusionConfig::default();
        let cells = assign_voxels(&[at(0.06, 0.06, 0.06), at(0.12, 0.0, 0.0), at(-0.01, 0.0, 0.0)], &cfg);
        assert_eq!(cells, vec![[0, 0, 0], [1, 0, 0], [-1, 0, 0]]);

        let cfg = FusionConfig { grid_origin_policy: OriginPolicy::SceneMin, ..cfg };
        let cells = assign_voxels(&[at(-0.01, 0.0, 0.0), at(0.2, 0.0, 0.0)], &cfg);
        assert_eq!(cells, vec![[0, 0, 0], [1, 0, 0]]);
    }

    #[test]
    fn weight_examples() {
        let w = fusion_weights(&[0.3, 0.3, 0.9], &[[0, 0, 0], [0, 0, 0], [5, 0, 0]], 1.0).unwrap();
        assert_eq!(w, vec![0.5, 0.5, 1.0]);
        let w = fusion_weights(&[1.0, 0.0], &[[0, 0, 0]; 2], 0.5).unwrap();
        let e2 = 2f64.exp();
        assert!((w[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((w[0] - 0.88080).abs() < 1e-5 && (w[1] - 0.11920).abs() < 1e-5);
        assert!(fusion_weights(&[1.0], &[], 1.0).is_err());
    }

    #[test]
    fn identical_members_fuse_to_themselves() {
        let g: GaussianPrimitive<f64> = GaussianPrimitive::new(
            Vec3::new(0.05, 0.02, 0.01),
            Vec3::new(0.03, 0.04, 0.05),
            Quat::new(0.9, 0.1, -0.3, 0.2),
            0.7,
            vec![1.0, 2.0, -1.0],
        )
        .unwrap();
        let feats = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 0.5, -1.0]);
        let cells = vec![[0, 0, 0]; 2];
        let w = fusion_weights(&[0.4, 0.4], &cells, 1.0).unwrap();
        let f = fuse(&[g.clone(), g.clone()], &feats, &w, &cells).unwrap();
        assert_eq!(f.primitives.len(), 1);
        let m = &f.primitives[0];
        assert!((m.mean - g.mean).norm() < 1e-15);
        assert!((m.scale - g.scale).norm() < 1e-15);
        assert!(m.rotation.0.iter().zip(g.rotation.0.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!((m.opacity - g.opacity).abs() < 1e-15);
        assert_eq!(f.features.row(0).iter().copied().collect::<Vec<_>>(), vec![0.5, -1.0]);
    }

    #[test]
    fn midpoint_of_two_means() {
        let prims = [at(0.0, 0.0, 0.0), at(0.06, 0.0, 0.0)];
        let cells = vec![[0, 0, 0]; 2];
        let f = fuse(&prims, &DMatrix::zeros(2, 1), &[0.5, 0.5], &cells).unwrap();
        assert!((f.primitives[0].mean - Vec3::new(0.03, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn antipodal_quaternions_are_aligned() {
        let q = Quat::new(0.8, 0.0, 0.6, 0.0);
        let mut a = at(0.01, 0.01, 0.01);
        let mut b = at(0.02, 0.01, 0.01);
        a.rotation = q;
        b.rotation = q.neg();
        let cells = vec![[0, 0, 0]; 2];
        let f = fuse(&[a, b], &DMatrix::zeros(2, 1), &[0.5, 0.5], &cells).unwrap();
        assert!(!f.degenerate_rotation[0]);
        let r = f.primitives[0].rotation;
        assert!((r.dot(&q).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn output_sorted_by_cell() {
        let prims = [at(0.5, 0.0, 0.0), at(0.01, 0.0, 0.0), at(0.3, 0.0, 0.0), at(0.02, 0.0, 0.0)];
        let cells = assign_voxels(&prims, &FusionConfig::default());
        let w = fusion_weights(&[0.5; 4], &cells, 1.0).unwrap();
        let f = fuse(&prims, &DMatrix::zeros(4, 3), &w, &cells).unwrap();
        assert_eq!(f.cells, vec![[0, 0, 0], [2, 0, 0], [4, 0, 0]]);
    }
}
