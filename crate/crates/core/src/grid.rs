//! Dense voxel grids (per-class probabilities or labels) and the `.vgrid` file format.
//!
//! Layout on disk, little-endian:
//!
//! | field      | type      |
//! |------------|-----------|
//! | magic      | `b"VGRD"` |
//! | version    | u32 = 1   |
//! | mode       | u8 (0 = probabilities, 1 = labels) |
//! | classes    | u32       |
//! | dims       | 3 × u32   |
//! | origin     | 3 × f64   |
//! | voxel_size | f64       |
//!
//! followed by the payload in row-major order with x fastest: `classes` f32
//! channels per voxel, or one u16 label per voxel.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{invalid, Error, Result};
use crate::geometry::Vec3;
use crate::scalar::Real;

pub const VGRID_MAGIC: &[u8; 4] = b"VGRD";
pub const VGRID_VERSION: u32 = 1;

/// Axis-aligned voxel lattice. Voxel `(0,0,0)` has its min corner at `origin`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGeometry<T: Real> {
    pub origin: Vec3<T>,
    pub voxel_size: T,
    pub dims: [usize; 3],
}

impl<T: Real> GridGeometry<T> {
    pub fn new(origin: Vec3<T>, voxel_size: T, dims: [usize; 3]) -> Result<Self> {
        if !voxel_size.finite() || voxel_size <= T::zero() {
            return invalid(format!("voxel size must be > 0, got {voxel_size}"));
        }
        if dims.contains(&0) {
            return invalid(format!("grid dims must be >= 1, got {dims:?}"));
        }
        if origin.iter().any(|v| !v.finite()) {
            return invalid("grid origin must be finite");
        }
        Ok(Self { origin, voxel_size, dims })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    /// Sampling point of a voxel: `origin + (ijk + 0.5) * voxel_size`.
    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3<T> {
        let h = T::lit(0.5);
        self.origin
            + Vec3::new(
                T::of_usize(i) + h,
                T::of_usize(j) + h,
                T::of_usize(k) + h,
            ) * self.voxel_size
    }

    #[inline]
    pub fn center_of(&self, idx: usize) -> Vec3<T> {
        let [i, j, k] = self.coords(idx);
        self.voxel_center(i, j, k)
    }

    /// Integer cell of a point, possibly outside the grid.
    #[inline]
    pub fn cell_of(&self, p: &Vec3<T>) -> [i64; 3] {
        let rel = (p - self.origin) / self.voxel_size;
        [
            rel.x.floor().as_f64() as i64,
            rel.y.floor().as_f64() as i64,
            rel.z.floor().as_f64() as i64,
        ]
    }

    pub fn contains_cell(&self, c: [i64; 3]) -> bool {
        (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < self.dims[a])
    }

    /// Voxel containing a point, if inside the grid.
    pub fn locate(&self, p: &Vec3<T>) -> Option<[usize; 3]> {
        let c = self.cell_of(p);
        self.contains_cell(c).then(|| [c[0] as usize, c[1] as usize, c[2] as usize])
    }

    pub fn max_corner(&self) -> Vec3<T> {
        self.origin
            + Vec3::new(
                T::of_usize(self.dims[0]),
                T::of_usize(self.dims[1]),
                T::of_usize(self.dims[2]),
            ) * self.voxel_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VoxelValues<T> {
    /// `classes` channels per voxel: occupied classes then empty.
    Probabilities(Vec<T>),
    Labels(Vec<u16>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid<T: Real> {
    pub geometry: GridGeometry<T>,
    /// Class count including the trailing empty class.
    pub classes: usize,
    pub values: VoxelValues<T>,
}

impl<T: Real> VoxelGrid<T> {
    pub fn from_probabilities(geometry: GridGeometry<T>, classes: usize, data: Vec<T>) -> Result<Self> {
        if classes < 2 {
            return invalid("need at least one occupied class plus empty");
        }
        if data.len() != geometry.len() * classes {
            return invalid(format!(
                "probability payload has {} values, expected {}",
                data.len(),
                geometry.len() * classes
            ));
        }
        Ok(Self { geometry, classes, values: VoxelValues::Probabilities(data) })
    }

    pub fn from_labels(geometry: GridGeometry<T>, classes: usize, labels: Vec<u16>) -> Result<Self> {
        if classes < 2 || classes > u16::MAX as usize {
            return invalid("class count out of range");
        }
        if labels.len() != geometry.len() {
            return invalid(format!("label payload has {} values, expected {}", labels.len(), geometry.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return invalid(format!("label {bad} out of range for {classes} classes"));
        }
        Ok(Self { geometry, classes, values: VoxelValues::Labels(labels) })
    }

    /// Label grid with every voxel empty.
    pub fn empty_labels(geometry: GridGeometry<T>, classes: usize) -> Self {
        let n = geometry.len();
        Self { geometry, classes, values: VoxelValues::Labels(vec![(classes - 1) as u16; n]) }
    }

    pub fn empty_label(&self) -> u16 {
        (self.classes - 1) as u16
    }

    pub fn labels(&self) -> Option<&[u16]> {
        match &self.values {
            VoxelValues::Labels(l) => Some(l),
            _ => None,
        }
    }

    pub fn labels_mut(&mut self) -> Option<&mut [u16]> {
        match &mut self.values {
            VoxelValues::Labels(l) => Some(l),
            _ => None,
        }
    }

    pub fn probabilities(&self) -> Option<&[T]> {
        match &self.values {
            VoxelValues::Probabilities(p) => Some(p),
            _ => None,
        }
    }

    pub fn voxel_probs(&self, idx: usize) -> Option<&[T]> {
        self.probabilities().map(|p| &p[idx * self.classes..(idx + 1) * self.classes])
    }

    pub fn is_label_mode(&self) -> bool {
        matches!(self.values, VoxelValues::Labels(_))
    }

    /// Largest per-voxel deviation of the channel sum from 1.
    pub fn max_normalization_error(&self) -> Option<T> {
        let p = self.probabilities()?;
        Some(p.chunks(self.classes).fold(T::zero(), |m, ch| {
            let s = ch.iter().fold(T::zero(), |a, &b| a + b);
            m.max((s - T::one()).abs())
        }))
    }

    pub fn congruent(&self, other: &VoxelGrid<T>) -> bool {
        self.geometry.dims == other.geometry.dims && self.classes == other.classes
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let g = &self.geometry;
        w.write_all(VGRID_MAGIC)?;
        w.write_u32::<LittleEndian>(VGRID_VERSION)?;
        w.write_u8(if self.is_label_mode() { 1 } else { 0 })?;
        w.write_u32::<LittleEndian>(self.classes as u32)?;
        for &d in &g.dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for v in g.origin.iter() {
            w.write_f64::<LittleEndian>(v.as_f64())?;
        }
        w.write_f64::<LittleEndian>(g.voxel_size.as_f64())?;
        match &self.values {
            VoxelValues::Probabilities(p) => {
                for v in p {
                    w.write_f32::<LittleEndian>(v.as_f32())?;
                }
            }
            VoxelValues::Labels(l) => {
                for &v in l {
                    w.write_u16::<LittleEndian>(v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof_as_format)?;
        if &magic != VGRID_MAGIC {
            return Err(Error::Format(format!("bad vgrid magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof_as_format)?;
        if version != VGRID_VERSION {
            return Err(Error::Format(format!("unsupported vgrid version {version}")));
        }
        let mode = r.read_u8().map_err(eof_as_format)?;
        let classes = r.read_u32::<LittleEndian>().map_err(eof_as_format)? as usize;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>().map_err(eof_as_format)? as usize;
        }
        let mut origin = Vec3::zeros();
        for a in 0..3 {
            origin[a] = T::lit(r.read_f64::<LittleEndian>().map_err(eof_as_format)?);
        }
        let voxel_size = T::lit(r.read_f64::<LittleEndian>().map_err(eof_as_format)?);
        let geometry = GridGeometry::new(origin, voxel_size, dims).map_err(as_format)?;
        let n = geometry.len();
        let grid = match mode {
            0 => {
                let mut data = Vec::with_capacity(n * classes);
                for _ in 0..n * classes {
                    data.push(T::of_f32(r.read_f32::<LittleEndian>().map_err(eof_as_format)?));
                }
                Self::from_probabilities(geometry, classes, data)
            }
            1 => {
                let mut labels = Vec::with_capacity(n);
                for _ in 0..n {
                    labels.push(r.read_u16::<LittleEndian>().map_err(eof_as_format)?);
                }
                Self::from_labels(geometry, classes, labels)
            }
            m => return Err(Error::Format(format!("unknown vgrid mode {m}"))),
        };
        let grid = grid.map_err(as_format)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after vgrid payload".into()));
        }
        Ok(grid)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

pub(crate) fn eof_as_format(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("truncated file".into())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn as_format(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::Format(m),
        other => other,
    }
}
