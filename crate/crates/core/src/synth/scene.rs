//! Ground-truth semantic scenes built from labelled boxes.
//!
//! Scene files are TOML:
//!
//! ```toml
//! extent = [4.8, 4.8, 2.88]
//! gt_voxel_size = 0.08
//! seed = 7
//!
//! [[box]]
//! min = [0.0, 0.0, 0.0]
//! max = [4.8, 4.8, 0.08]
//! class = 1
//! ```
//!
//! A voxel takes the class of the last box containing its center.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::DEFAULT_CLASSES;
use crate::geometry::Vec3;
use crate::grid::{GridGeometry, VoxelGrid};
use crate::scalar::Real;

/// Semantic classes in label order; the empty class follows them.
pub const CLASS_NAMES: [&str; 11] =
    ["ceiling", "floor", "wall", "window", "chair", "bed", "sofa", "table", "tvs", "furniture", "objects"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class: u16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub extent: [f64; 3],
    #[serde(default = "default_gt_voxel")]
    pub gt_voxel_size: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default, rename = "box")]
    pub boxes: Vec<BoxSpec>,
}

fn default_gt_voxel() -> f64 {
    0.08
}

fn default_classes() -> usize {
    DEFAULT_CLASSES
}

const TOL: f64 = 1e-9;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
            return invalid(format!("scene extent must be positive, got {:?}", self.extent));
        }
        if !(self.gt_voxel_size.is_finite() && self.gt_voxel_size > 0.0) {
            return invalid(format!("gt_voxel_size must be > 0, got {}", self.gt_voxel_size));
        }
        if self.classes < 2 {
            return invalid("a scene needs at least 2 classes");
        }
        for (i, b) in self.boxes.iter().enumerate() {
            for a in 0..3 {
                if !(b.min[a] <= b.max[a]) || b.min[a] < -TOL || b.max[a] > self.extent[a] + TOL {
                    return invalid(format!("box {i} is outside the scene extent or inverted"));
                }
            }
            if b.class as usize > self.classes - 2 {
                return invalid(format!("box {i} class {} outside [0, {}]", b.class, self.classes - 2));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.extent.map(|e| (e / self.gt_voxel_size - TOL).ceil().max(1.0) as usize)
    }

    pub fn geometry<T: Real>(&self) -> Result<GridGeometry<T>> {
        GridGeometry::new(Vec3::zeros(), T::lit(self.gt_voxel_size), self.dims())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::Config(format!("scene: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    /// Furnished 4.8 × 4.8 × 2.88 m room on a 0.08 m grid (60 × 60 × 36).
    ///
    /// Structures are one voxel thick, fixtures sit flush in the walls and
    /// furniture stands on thin legs, so nearly every occupied voxel is
    /// visible from inside the room.
    pub fn default_room() -> Self {
        let b = |min: [f64; 3], max: [f64; 3], class: u16| BoxSpec { min, max, class };
        let (x, y, z) = (4.8, 4.8, 2.88);
        let v = 0.08;
        let mut boxes = vec![
            b([v, v, 0.0], [x - v, y - v, v], 1),
            b([0.0, 0.0, z - v], [x, y, z], 0),
            b([0.0, 0.0, 0.0], [v, y, z - v], 2),
            b([x - v, 0.0, 0.0], [x, y, z - v], 2),
            b([0.0, 0.0, 0.0], [x, v, z - v], 2),
            b([0.0, y - v, 0.0], [x, y, z - v], 2),
            // window and built-in cabinet front set into the walls, screen on the east wall
            b([0.0, 1.6, 0.96], [v, 3.2, 1.76], 3),
            b([0.56, 0.0, v], [1.52, v, 1.28], 9),
            b([x - v, 1.92, 0.8], [x, 2.88, 1.36], 8),
        ];
        let legged = |min: [f64; 3], max: [f64; 3], class: u16, boxes: &mut Vec<BoxSpec>| {
            boxes.push(b(min, max, class));
            for (lx, ly) in [(min[0], min[1]), (max[0] - v, min[1]), (min[0], max[1] - v), (max[0] - v, max[1] - v)] {
                boxes.push(b([lx, ly, v], [lx + v, ly + v, min[2]], class));
            }
        };
        // table with two small objects on top
        legged([1.76, 2.0, 0.72], [2.4, 2.64, 0.8], 7, &mut boxes);
        boxes.push(b([1.92, 2.16, 0.8], [2.08, 2.32, 0.96], 10));
        boxes.push(b([2.16, 2.4, 0.8], [2.24, 2.48, 0.88], 10));
        // bed, backless sofa and a chair on legs
        legged([3.28, 0.8, 0.64], [3.92, 1.6, 0.72], 5, &mut boxes);
        legged([1.2, 3.84, 0.48], [2.32, 4.16, 0.56], 6, &mut boxes);
        legged([2.64, 2.08, 0.4], [3.04, 2.48, 0.48], 4, &mut boxes);
        boxes.push(b([2.96, 2.08, 0.48], [3.04, 2.48, 0.72], 4));
        Self { extent: [x, y, z], gt_voxel_size: v, seed: 0, classes: DEFAULT_CLASSES, boxes }
    }
}

/// Label grid of a scene; overlapping boxes resolve to the later entry.
pub fn generate_scene<T: Real>(spec: &SceneSpec) -> Result<VoxelGrid<T>> {
    spec.validate()?;
    let geom = spec.geometry::<T>()?;
    let mut grid = VoxelGrid::empty_labels(geom.clone(), spec.classes);
    let labels = grid.labels_mut().expect("label grid");
    let h = spec.gt_voxel_size;
    for b in &spec.boxes {
        // voxel range whose centers lie in [min, max]
        let lo: [usize; 3] = std::array::from_fn(|a| ((b.min[a] / h - 0.5 - TOL).ceil().max(0.0)) as usize);
        let hi: [usize; 3] = std::array::from_fn(|a| {
            let top = (b.max[a] / h - 0.5 + TOL).floor();
            if top < 0.0 { 0 } else { (top as usize + 1).min(geom.dims[a]) }
        });
        for k in lo[2]..hi[2] {
            for j in lo[1]..hi[1] {
                for i in lo[0]..hi[0] {
                    labels[geom.index(i, j, k)] = b.class;
                }
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(boxes: Vec<BoxSpec>) -> SceneSpec {
        SceneSpec { extent: [0.8, 0.8, 0.8], gt_voxel_size: 0.08, seed: 0, classes: 12, boxes }
    }

    /// Per-voxel center test, no index arithmetic shortcuts.
    fn oracle(spec: &SceneSpec) -> Vec<u16> {
        let geom = spec.geometry::<f64>().unwrap();
        (0..geom.len())
            .map(|idx| {
                let c = geom.center_of(idx);
                spec.boxes
                    .iter()
                    .rev()
                    .find(|b| (0..3).all(|a| c[a] >= b.min[a] && c[a] <= b.max[a]))
                    .map_or(11, |b| b.class)
            })
            .collect()
    }

    #[test]
    fn empty_scene_is_empty() {
        let g = generate_scene::<f64>(&small(vec![])).unwrap();
        assert!(g.labels().unwrap().iter().all(|&l| l == 11));
    }

    #[test]
    fn single_voxel_box() {
        let g = generate_scene::<f64>(&small(vec![BoxSpec { min: [0.08, 0.16, 0.24], max: [0.16, 0.24, 0.32], class: 3 }]))
            .unwrap();
        let labels = g.labels().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l != 11).count(), 1);
        assert_eq!(labels[g.geometry.index(1, 2, 3)], 3);
    }

    #[test]
    fn later_box_wins() {
        let spec = small(vec![
            BoxSpec { min: [0.0; 3], max: [0.4; 3], class: 1 },
            BoxSpec { min: [0.2; 3], max: [0.8; 3], class: 2 },
        ]);
        let g = generate_scene::<f64>(&spec).unwrap();
        let labels = g.labels().unwrap();
        assert_eq!(labels[g.geometry.index(3, 3, 3)], 2);
        assert_eq!(labels[g.geometry.index(1, 1, 1)], 1);
        assert_eq!(labels, &oracle(&spec)[..]);
    }

    #[test]
    fn default_room_matches_oracle() {
        let spec = SceneSpec::default_room();
        assert_eq!(spec.dims(), [60, 60, 36]);
        let g = generate_scene::<f64>(&spec).unwrap();
        assert_eq!(g.labels().unwrap(), &oracle(&spec)[..]);
        for class in 0..11u16 {
            assert!(g.labels().unwrap().contains(&class), "class {class} missing");
        }
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let spec = SceneSpec::default_room();
        let back = SceneSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(back, spec);
        let bad = "extent = [1.0, 1.0, 1.0]\n[[box]]\nmin = [0.0, 0.0, 0.0]\nmax = [2.0, 0.5, 0.5]\nclass = 1\n";
        assert!(SceneSpec::from_toml_str(bad).is_err());
        let bad_class = "extent = [1.0, 1.0, 1.0]\n[[box]]\nmin = [0.0, 0.0, 0.0]\nmax = [0.5, 0.5, 0.5]\nclass = 11\n";
        assert!(SceneSpec::from_toml_str(bad_class).is_err());
        assert!(SceneSpec::from_toml_str("extent = [1.0, 1.0, 1.0]\nbogus = 1\n").is_err());
    }
}
