//! Occupancy IoU and semantic mIoU under frustum masks.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::camera::CameraFrame;
use crate::error::{invalid, Result};
use crate::grid::{GridGeometry, VoxelGrid};
use crate::scalar::Real;

/// Confusion counts between ground truth (rows) and prediction (columns)
/// over masked voxels, all classes including empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, gt: u16, pred: u16) {
        self.counts[gt as usize * self.classes + pred as usize] += 1;
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate<T: Real>(&mut self, pred: &VoxelGrid<T>, gt: &VoxelGrid<T>, mask: &[bool]) -> Result<()> {
        let (p, g) = label_pair(pred, gt, mask)?;
        for ((&a, &b), _) in g.iter().zip(p).zip(mask).filter(|(_, &m)| m) {
            self.add(a, b);
        }
        Ok(())
    }

    /// Report from the accumulated counts; `observed_fraction` is left to
    /// the caller, which knows the grid size.
    pub fn report(&self) -> MetricReport {
        let empty = self.classes - 1;
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fnn = 0u64;
        for g in 0..self.classes {
            for p in 0..self.classes {
                let n = self.get(g, p);
                match (g != empty, p != empty) {
                    (true, true) => tp += n,
                    (false, true) => fp += n,
                    (true, false) => fnn += n,
                    _ => {}
                }
            }
        }
        let iou = ratio(tp, tp + fp + fnn);
        let mut per_class = Vec::with_capacity(empty);
        let mut present = Vec::new();
        for l in 0..empty {
            let inter = self.get(l, l);
            let gt_l: u64 = (0..self.classes).map(|p| self.get(l, p)).sum();
            let pred_l: u64 = (0..self.classes).map(|g| self.get(g, l)).sum();
            let union = gt_l + pred_l - inter;
            let v = (union > 0).then(|| inter as f64 / union as f64);
            if gt_l > 0 {
                present.push(v.unwrap_or(0.0));
            }
            per_class.push(v);
        }
        let miou = if present.is_empty() { f64::NAN } else { present.iter().sum::<f64>() / present.len() as f64 };
        MetricReport { iou, per_class_iou: per_class, miou, observed_fraction: f64::NAN, masked_voxels: self.total() }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

fn label_pair<'a, T: Real>(pred: &'a VoxelGrid<T>, gt: &'a VoxelGrid<T>, mask: &[bool]) -> Result<(&'a [u16], &'a [u16])> {
    if !pred.congruent(gt) {
        return invalid("prediction and ground truth grids are not congruent");
    }
    let (Some(p), Some(g)) = (pred.labels(), gt.labels()) else {
        return invalid("metrics need label-mode grids");
    };
    if mask.len() != g.len() {
        return invalid(format!("mask has {} entries, grid has {}", mask.len(), g.len()));
    }
    Ok((p, g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Class-agnostic occupancy IoU; NaN when nothing is occupied in either grid.
    pub iou: f64,
    /// Per semantic class; `None` when the class is absent from both grids.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over classes with ground-truth support; NaN when there are none.
    pub miou: f64,
    pub observed_fraction: f64,
    pub masked_voxels: u64,
}

impl MetricReport {
    pub fn to_text(&self, names: &[&str]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "iou = {:.6}", self.iou);
        let _ = writeln!(s, "miou = {:.6}", self.miou);
        let _ = writeln!(s, "observed_fraction = {:.6}", self.observed_fraction);
        let _ = writeln!(s, "masked_voxels = {}", self.masked_voxels);
        for (l, v) in self.per_class_iou.iter().enumerate() {
            let name = names.get(l).copied().map_or_else(|| format!("class_{l}"), str::to_string);
            match v {
                Some(v) => {
                    let _ = writeln!(s, "iou_{name} = {v:.6}");
                }
                None => {
                    let _ = writeln!(s, "iou_{name} = absent");
                }
            }
        }
        s
    }

    pub fn csv_header(names: &[&str]) -> String {
        let mut h = String::from("iou,miou,observed_fraction,masked_voxels");
        for n in names {
            h.push_str(&format!(",iou_{n}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{:.6},{:.6},{:.6},{}", self.iou, self.miou, self.observed_fraction, self.masked_voxels);
        for v in &self.per_class_iou {
            match v {
                Some(v) => r.push_str(&format!(",{v:.6}")),
                None => r.push_str(",absent"),
            }
        }
        r
    }
}

/// IoU metrics of `pred` against `gt` over masked voxels.
pub fn iou<T: Real>(pred: &VoxelGrid<T>, gt: &VoxelGrid<T>, mask: &[bool]) -> Result<MetricReport> {
    let mut c = Confusion::new(gt.classes);
    c.accumulate(pred, gt, mask)?;
    if c.total() == 0 {
        return invalid("evaluation mask is empty");
    }
    let mut r = c.report();
    r.observed_fraction = c.total() as f64 / mask.len() as f64;
    Ok(r)
}

/// Voxels whose centers lie inside the camera frustum.
pub fn local_mask<T: Real>(geom: &GridGeometry<T>, frame: &CameraFrame<T>) -> Vec<bool> {
    (0..geom.len()).into_par_iter().map(|idx| frame.contains(&geom.center_of(idx))).collect()
}

/// Union of the local masks of all frames.
pub fn observed_mask<T: Real>(geom: &GridGeometry<T>, frames: &[CameraFrame<T>]) -> Result<Vec<bool>> {
    if frames.is_empty() {
        return invalid("observed mask needs at least one frame");
    }
    let mut mask = vec![false; geom.len()];
    for f in frames {
        extend_mask(&mut mask, geom, f);
    }
    Ok(mask)
}

pub fn extend_mask<T: Real>(mask: &mut [bool], geom: &GridGeometry<T>, frame: &CameraFrame<T>) {
    mask.par_iter_mut().enumerate().for_each(|(idx, m)| {
        if !*m {
            *m = frame.contains(&geom.center_of(idx));
        }
    });
}
