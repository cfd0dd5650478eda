//! Forward evaluation of the semantic scene completion objective.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::VoxelGrid;
use crate::scalar::Real;

/// Floor applied to probabilities inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reweight {
    None,
    /// `C′ L + λ e^{−C′}` with `C′ = exp(c′)`.
    ExpPenalty,
    /// `C′ L − λ ln C′` with `C′ = 1 + exp(c′)`.
    LogPenalty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub focal_gamma: f64,
    pub stage_count: usize,
    pub reweight: Reweight,
    pub reweight_lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda1: 100.0, lambda2: 2.0, focal_gamma: 2.0, stage_count: 1, reweight: Reweight::None, reweight_lambda: 0.2 }
    }
}

struct Pair<'a, T> {
    probs: &'a [T],
    labels: &'a [u16],
    classes: usize,
    voxels: Vec<usize>,
}

fn pair<'a, T: Real>(pred: &'a VoxelGrid<T>, gt: &'a VoxelGrid<T>, mask: &[bool]) -> Result<Pair<'a, T>> {
    if !pred.congruent(gt) {
        return invalid("prediction and ground truth grids are not congruent");
    }
    let (Some(probs), Some(labels)) = (pred.probabilities(), gt.labels()) else {
        return invalid("losses need a probability prediction and a label ground truth");
    };
    if mask.len() != labels.len() {
        return invalid(format!("mask has {} entries, grid has {}", mask.len(), labels.len()));
    }
    let voxels: Vec<usize> = (0..labels.len()).filter(|&i| mask[i]).collect();
    if voxels.is_empty() {
        return invalid("loss mask is empty");
    }
    Ok(Pair { probs, labels, classes: gt.classes, voxels })
}

fn mean<T: Real>(v: &[T]) -> T {
    v.iter().copied().fold(T::zero(), |a, b| a + b) / T::of_usize(v.len())
}

/// Per masked voxel `−(1 − p_t)^γ ln p_t`, in voxel order.
pub fn focal_per_voxel<T: Real>(pred: &VoxelGrid<T>, gt: &VoxelGrid<T>, mask: &[bool], gamma: f64) -> Result<Vec<T>> {
    let p = pair(pred, gt, mask)?;
    let g = T::lit(gamma);
    Ok(p.voxels
        .iter()
        .map(|&i| {
            let pt = p.probs[i * p.classes + p.labels[i] as usize].max(T::lit(LOG_EPS));
            let w = if gamma == 0.0 { T::one() } else { (T::one() - pt).max(T::zero()).powf(g) };
            -w * pt.ln()
        })
        .collect())
}

/// Focal loss averaged over masked voxels, all classes including empty.
pub fn focal_loss<T: Real>(pred: &VoxelGrid<T>, gt: &VoxelGrid<T>, mask: &[bool], gamma: f64) -> Result<T> {
    Ok(mean(&focal_per_voxel(pred, gt, mask, gamma)?))
}

/// Gradient of the Jaccard extension for ground truth sorted by
/// decreasing error.
fn lovasz_grad<T: Real>(fg_sorted: &[bool]) -> Vec<T> {
    let gts = fg_sorted.iter().filter(|&&f| f).count();
    let mut inter = gts;
    let mut union = gts;
    let mut prev = T::zero();
    fg_sorted
        .iter()
        .map(|&f| {
            if f {
                inter -= 1;
            } else {
                union += 1;
            }
            let j = T::one() - T::of_usize(inter) / T::of_usize(union);
            let g = j - prev;
            prev = j;
            g
        })
        .collect()
}

/// Lovász-softmax loss averaged over the classes (empty included) present
/// in the masked ground truth.
pub fn lovasz_loss<T: Real>(pred: &VoxelGrid<T>, gt: &VoxelGrid<T>, mask: &[bool]) -> Result<T> {
    let p = pair(pred, gt, mask)?;
    let mut total = T::zero();
    let mut present = 0usize;
    for c in 0..p.classes {
        let mut items: Vec<(T, bool)> = p
            .voxels
            .iter()
            .map(|&i| {
                let fg = p.labels[i] as usize == c;
                let prob = p.probs[i * p.classes + c];
                ((if fg { T::one() } else { T::zero() } - prob).abs(), fg)
            })
            .collect();
        if !items.iter().any(|&(_, fg)| fg) {
            continue;
        }
        present += 1;
        // stable sort keeps voxel order among equal errors
        items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let fg: Vec<bool> = items.iter().map(|&(_, f)| f).collect();
        let grad = lovasz_grad::<T>(&fg);
        total += items.iter().zip(&grad).fold(T::zero(), |acc, (&(e, _), &g)| acc + e * g);
    }
    Ok(total / T::of_usize(present))
}

/// Soft precision, recall and specificity of predicted occupancy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoTerms<T> {
    pub precision: T,
    pub recall: T,
    pub specificity: T,
}

pub fn geo_terms<T: Real>(pred: &VoxelGrid<T>, gt: &VoxelGrid<T>, mask: &[bool]) -> Result<GeoTerms<T>> {
    let p = pair(pred, gt, mask)?;
    let empty = p.classes - 1;
    let (mut sx, mut sy, mut sxy, mut sneg, mut sneg_both) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for &i in &p.voxels {
        let x = T::one() - p.probs[i * p.classes + empty];
        let y = if p.labels[i] as usize != empty { T::one() } else { T::zero() };
        sx += x;
        sy += y;
        sxy += x * y;
        sneg += T::one() - y;
        sneg_both += (T::one() - x) * (T::one() - y);
    }
    if sy == T::zero() || sneg == T::zero() {
        return invalid("geometry loss needs both occupied and empty ground truth voxels");
    }
    let precision = if sx > T::zero() { sxy / sx } else { T::zero() };
    Ok(GeoTerms { precision, recall: sxy / sy, specificity: sneg_both / sneg })
}

/// `−(ln P + ln R + ln S)` over occupancy `x = 1 − p_empty`.
pub fn geo_scale_loss<T: Real>(pred: &VoxelGrid<T>, gt: &VoxelGrid<T>, mask: &[bool]) -> Result<T> {
    let t = geo_terms(pred, gt, mask)?;
    let eps = T::lit(LOG_EPS);
    let l = -(t.precision.max(eps).ln() + t.recall.max(eps).ln() + t.specificity.max(eps).ln());
    Ok(l.max(T::zero()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SscLoss<T> {
    pub focal: T,
    pub lovasz: T,
    pub geo: T,
    pub total: T,
}

/// `λ1 focal + λ2 lovasz + geo`.
pub fn ssc_loss<T: Real>(pred: &VoxelGrid<T>, gt: &VoxelGrid<T>, mask: &[bool], cfg: &LossConfig) -> Result<SscLoss<T>> {
    let focal = focal_loss(pred, gt, mask, cfg.focal_gamma)?;
    let lovasz = lovasz_loss(pred, gt, mask)?;
    let geo = geo_scale_loss(pred, gt, mask)?;
    Ok(SscLoss { focal, lovasz, geo, total: combine(focal, lovasz, geo, cfg) })
}

pub fn combine<T: Real>(focal: T, lovasz: T, geo: T, cfg: &LossConfig) -> T {
    T::lit(cfg.lambda1) * focal + T::lit(cfg.lambda2) * lovasz + geo
}

/// Decayed stage weights `2^j / (2^n − 1)` for `j = 1..=n`. They sum to 2.
pub fn stage_weights(n: usize) -> Result<Vec<f64>> {
    if n == 0 || n > 62 {
        return invalid(format!("stage count must be in [1, 62], got {n}"));
    }
    let den = ((1u64 << n) - 1) as f64;
    Ok((1..=n).map(|j| (1u64 << j) as f64 / den).collect())
}

/// Confidence-reweighted mean of per-voxel losses.
pub fn reweighted_loss<T: Real>(base: &[T], conf_map: &[T], mode: Reweight, lambda: f64) -> Result<T> {
    if base.len() != conf_map.len() {
        return invalid(format!("{} losses but {} confidences", base.len(), conf_map.len()));
    }
    if base.is_empty() {
        return invalid("no losses to reweight");
    }
    let lam = T::lit(lambda);
    let per: Vec<T> = match mode {
        Reweight::None => base.to_vec(),
        Reweight::ExpPenalty => base
            .iter()
            .zip(conf_map)
            .map(|(&l, &c)| {
                let w = c.exp();
                w * l + lam * (-w).exp()
            })
            .collect(),
        Reweight::LogPenalty => base
            .iter()
            .zip(conf_map)
            .map(|(&l, &c)| {
                let w = T::one() + c.exp();
                assert!(w > T::zero());
                w * l - lam * w.ln()
            })
            .collect(),
    };
    Ok(mean(&per))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::grid::GridGeometry;
    use proptest::prelude::*;

    fn geom(n: usize) -> GridGeometry<f64> {
        GridGeometry::new(Vec3::zeros(), 1.0, [n, 1, 1]).unwrap()
    }

    fn probs(rows: Vec<Vec<f64>>) -> VoxelGrid<f64> {
        let c = rows[0].len();
        VoxelGrid::from_probabilities(geom(rows.len()), c, rows.concat()).unwrap()
    }

    fn labels(l: Vec<u16>, c: usize) -> VoxelGrid<f64> {
        VoxelGrid::from_labels(geom(l.len()), c, l).unwrap()
    }

    fn one_hot(l: &[u16], c: usize) -> VoxelGrid<f64> {
        probs(l.iter().map(|&k| (0..c).map(|j| if j == k as usize { 1.0 } else { 0.0 }).collect()).collect())
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let gt = [0u16, 1, 2, 2, 0];
        let m = [true; 5];
        let p = one_hot(&gt, 3);
        let g = labels(gt.to_vec(), 3);
        assert_eq!(focal_loss(&p, &g, &m, 2.0).unwrap(), 0.0);
        assert_eq!(lovasz_loss(&p, &g, &m).unwrap(), 0.0);
        assert_eq!(geo_scale_loss(&p, &g, &m).unwrap(), 0.0);
        assert_eq!(ssc_loss(&p, &g, &m, &LossConfig::default()).unwrap().total, 0.0);
        assert!(focal_loss(&p, &g, &[false; 5], 2.0).is_err());
    }

    #[test]
    fn focal_half_probability() {
        let p = probs(vec![vec![0.5, 0.5]]);
        let g = labels(vec![0], 2);
        let v = focal_loss(&p, &g, &[true], 2.0).unwrap();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.17329).abs() < 1e-5);
    }

    /// Jaccard loss of an explicit mispredicted set, the set function whose
    /// Lovász extension the loss evaluates.
    fn jaccard_of(fg: &[bool], mispredicted: &[usize]) -> f64 {
        let m: Vec<bool> = (0..fg.len()).map(|i| mispredicted.contains(&i)).collect();
        let kept = (0..fg.len()).filter(|&i| fg[i] && !m[i]).count();
        let union = (0..fg.len()).filter(|&i| fg[i] || m[i]).count();
        1.0 - kept as f64 / union as f64
    }

    #[test]
    fn lovasz_binary_hand_cases() {
        // errors (1,0,0,0): the erring voxel is a positive, then a negative
        for (fg, expect) in [([true, true, false, false], 0.5), ([false, true, true, false], 1.0 / 3.0)] {
            let g = lovasz_grad::<f64>(&fg);
            let value = g[0];
            assert!((value - expect).abs() < 1e-12);
            assert!((value - jaccard_of(&fg, &[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn lovasz_matches_set_extension_oracle() {
        // two classes; class 0 has two positives
        let p = probs(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = labels(vec![0, 0, 1, 1], 2);
        let v = lovasz_loss(&p, &g, &[true; 4]).unwrap();
        // class 0 errors: voxel0 (pos, 1), voxel2 (neg, 1); class 1 symmetric
        let fg0 = [true, true, false, false];
        let c0 = jaccard_of(&fg0, &[0]) + (jaccard_of(&fg0, &[0, 2]) - jaccard_of(&fg0, &[0]));
        assert!((v - c0).abs() < 1e-12);
        let uniform = probs(vec![vec![0.5, 0.5]; 4]);
        assert!(lovasz_loss(&uniform, &g, &[true; 4]).unwrap() > 0.0);
    }

    #[test]
    fn geo_half_occupancy() {
        let p = probs(vec![vec![0.5, 0.5]; 4]);
        let g = labels(vec![0, 0, 1, 1], 2);
        let t = geo_terms(&p, &g, &[true; 4]).unwrap();
        assert_eq!((t.precision, t.recall, t.specificity), (0.5, 0.5, 0.5));
        let v = geo_scale_loss(&p, &g, &[true; 4]).unwrap();
        assert!((v - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 2.07944).abs() < 1e-5);
        assert!(geo_scale_loss(&p, &labels(vec![0; 4], 2), &[true; 4]).is_err());
        assert!(geo_scale_loss(&p, &labels(vec![1; 4], 2), &[true; 4]).is_err());
    }

    #[test]
    fn ssc_is_linear_in_components() {
        let p = probs(vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3], vec![0.2, 0.2, 0.6]]);
        let g = labels(vec![0, 1, 2], 3);
        let m = [true; 3];
        let cfg = LossConfig::default();
        let s = ssc_loss(&p, &g, &m, &cfg).unwrap();
        let sep = 100.0 * focal_loss(&p, &g, &m, 2.0).unwrap() + 2.0 * lovasz_loss(&p, &g, &m).unwrap()
            + geo_scale_loss(&p, &g, &m).unwrap();
        assert!((s.total - sep).abs() < 1e-12);
    }

    #[test]
    fn stage_weight_examples() {
        assert_eq!(stage_weights(1).unwrap(), vec![2.0]);
        assert_eq!(stage_weights(2).unwrap(), vec![2.0 / 3.0, 4.0 / 3.0]);
        assert_eq!(stage_weights(3).unwrap(), vec![2.0 / 7.0, 4.0 / 7.0, 8.0 / 7.0]);
        for n in 1..=8 {
            assert!((stage_weights(n).unwrap().iter().sum::<f64>() - 2.0).abs() < 1e-12);
        }
        assert!(stage_weights(0).is_err());
    }

    #[test]
    fn reweighting_examples() {
        let base = [0.3, 0.7, 1.1];
        let zero = [0.0; 3];
        let m = base.iter().sum::<f64>() / 3.0;
        assert_eq!(reweighted_loss(&base, &zero, Reweight::None, 0.2).unwrap(), m);
        let e = reweighted_loss(&base, &zero, Reweight::ExpPenalty, 0.2).unwrap();
        assert!((e - (m + 0.2 * (-1f64).exp())).abs() < 1e-12);
        let l = reweighted_loss(&base, &zero, Reweight::LogPenalty, 0.2).unwrap();
        assert!((l - (2.0 * m - 0.2 * 2f64.ln())).abs() < 1e-12);
        assert!(reweighted_loss(&base, &zero[..2], Reweight::None, 0.2).is_err());
    }

    proptest! {
        #[test]
        fn focal_without_focusing_is_cross_entropy(
            rows in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 4), 1..30),
            seed in 0u16..4,
        ) {
            let norm: Vec<Vec<f64>> = rows.iter().map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|v| v / s).collect() }).collect();
            let l: Vec<u16> = (0..norm.len()).map(|i| ((i as u16) + seed) % 4).collect();
            let ce = norm.iter().zip(&l).map(|(r, &k)| -r[k as usize].ln()).sum::<f64>() / norm.len() as f64;
            let m = vec![true; norm.len()];
            let f = focal_loss(&probs(norm), &labels(l, 4), &m, 0.0).unwrap();
            prop_assert!((f - ce).abs() <= 1e-9);
        }

        #[test]
        fn geo_loss_monotone_in_correct_voxel(x0 in 0.05f64..0.9, dx in 0.0f64..0.09, idx in 0usize..4) {
            // voxels 0,1 occupied; raising occupancy of an occupied voxel or
            // lowering it on an empty one never increases the loss
            let base = [x0, 0.5, 0.3, 0.6];
            let g = labels(vec![0, 0, 1, 1], 2);
            let grid = |x: &[f64]| probs(x.iter().map(|&o| vec![o, 1.0 - o]).collect());
            let mut better = base;
            better[idx] = if idx < 2 { (base[idx] + dx).min(1.0) } else { (base[idx] - dx).max(0.0) };
            let a = geo_scale_loss(&grid(&base), &g, &[true; 4]).unwrap();
            let b = geo_scale_loss(&grid(&better), &g, &[true; 4]).unwrap();
            prop_assert!(b <= a + 1e-12);
        }
    }
}
