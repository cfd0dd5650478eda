//! Persistent world-frame Gaussian memory.
//!
//! Each update retrieves the stored primitives visible from the new frame,
//! runs the dual-stream temporal step against the local prediction, fuses
//! the union per fusion cell and writes the result back. Primitives outside
//! the frustum are carried over untouched unless a fused output lands in
//! their cell, in which case they join that cell's fusion group so every
//! cell keeps exactly one primitive.
//!
//! `.gmem` layout, little-endian: magic `b"GMEM"`, version u32 = 1, count
//! u64, d_model u32, classes u32, fusion voxel size f64, fusion origin
//! 3 × f64, then `count` records of f32 `mean[3] scale[3] quat[4] opacity
//! logits[classes-1] feature[d_model]`.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attn::{dte_step, EncoderWeights};
use crate::batch::PrimitiveBatch;
use crate::camera::CameraFrame;
use crate::cavf::{assign_voxels_from, cell_of, fuse_batch_from, group_by_cell, Cell, FusionConfig};
use crate::conf::ConfidenceConfig;
use crate::error::{invalid, Error, Result};
use crate::gaussian::GaussianPrimitive;
use crate::geometry::{Quat, Vec3};
use crate::grid::eof_as_format;
use crate::scalar::Real;

pub const GMEM_MAGIC: &[u8; 4] = b"GMEM";
pub const GMEM_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FovTest {
    /// Mean projects inside the image within the depth range.
    Mean,
    /// Any corner of the 3σ bounding box passes the mean test.
    Extent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryConfig {
    pub fusion: FusionConfig,
    pub confidence: ConfidenceConfig,
    pub n_blocks: usize,
    pub fov: FovTest,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            confidence: ConfidenceConfig::default(),
            n_blocks: 2,
            fov: FovTest::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameStats {
    pub frame: u64,
    pub count: usize,
    pub bytes: usize,
    pub inside_fov: usize,
    pub local_count: usize,
}

/// f32 values per stored primitive.
pub fn record_floats(classes: usize, d_model: usize) -> usize {
    3 + 3 + 4 + 1 + (classes - 1) + d_model
}

#[derive(Clone, Debug)]
pub struct GaussianMemory<T: Real> {
    batch: PrimitiveBatch<T>,
    cells: Vec<Cell>,
    cell_index: HashMap<Cell, usize>,
    origin: Vec3<T>,
    voxel_size: T,
    classes: usize,
    frame_counter: u64,
    stats: Vec<FrameStats>,
}

/// Memory split by a camera frustum.
#[derive(Clone, Debug)]
pub struct FovSplit<T: Real> {
    pub inside: PrimitiveBatch<T>,
    pub inside_ids: Vec<usize>,
    pub outside_ids: Vec<usize>,
}

pub fn in_fov<T: Real>(g: &GaussianPrimitive<T>, frame: &CameraFrame<T>, test: FovTest) -> bool {
    match test {
        FovTest::Mean => frame.contains(&g.mean),
        FovTest::Extent => {
            if frame.contains(&g.mean) {
                return true;
            }
            let sigma = g.covariance().0;
            let half = Vec3::new(sigma[(0, 0)].sqrt(), sigma[(1, 1)].sqrt(), sigma[(2, 2)].sqrt()) * T::lit(3.0);
            (0..8).any(|corner| {
                let sign = |bit: usize| if corner & (1 << bit) != 0 { T::one() } else { -T::one() };
                let p = g.mean + Vec3::new(half.x * sign(0), half.y * sign(1), half.z * sign(2));
                frame.contains(&p)
            })
        }
    }
}

impl<T: Real> GaussianMemory<T> {
    /// First-frame memory: the self-fused local prediction.
    pub fn init(first: &PrimitiveBatch<T>, cfg: &MemoryConfig) -> Result<Self> {
        if first.is_empty() {
            return invalid("initial prediction is empty");
        }
        cfg.fusion.validate()?;
        let classes = first.primitives[0].num_classes();
        let origin = cfg.fusion.origin(&first.primitives);
        let mut batch = first.clone();
        batch.recompute_confidence(&cfg.confidence)?;
        let voxel_size = T::lit(cfg.fusion.voxel_size);
        let (fused, _) = fuse_batch_from(&batch, &origin, &cfg.fusion)?;
        let (batch, cells) = settle(fused, &origin, voxel_size, cfg)?;
        let mut mem = Self {
            batch,
            cells,
            cell_index: HashMap::new(),
            origin,
            voxel_size,
            classes,
            frame_counter: 0,
            stats: Vec::new(),
        };
        mem.reindex()?;
        mem.finish_frame(0, first.len());
        Ok(mem)
    }

    fn reindex(&mut self) -> Result<()> {
        self.cell_index.clear();
        for (i, c) in self.cells.iter().enumerate() {
            if self.cell_index.insert(*c, i).is_some() {
                return Err(Error::Invariant(format!("two memory primitives share cell {c:?}")));
            }
        }
        Ok(())
    }

    fn finish_frame(&mut self, inside: usize, local: usize) {
        self.frame_counter += 1;
        self.stats.push(FrameStats {
            frame: self.frame_counter,
            count: self.len(),
            bytes: self.bytes_estimate(),
            inside_fov: inside,
            local_count: local,
        });
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn batch(&self) -> &PrimitiveBatch<T> {
        &self.batch
    }

    pub fn primitives(&self) -> &[GaussianPrimitive<T>] {
        &self.batch.primitives
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell_of_primitive(&self, cell: &Cell) -> Option<usize> {
        self.cell_index.get(cell).copied()
    }

    pub fn origin(&self) -> Vec3<T> {
        self.origin
    }

    pub fn voxel_size(&self) -> T {
        self.voxel_size
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn d_model(&self) -> usize {
        self.batch.d_model()
    }

    pub fn frame_counter(&self) -> u64 {
        self.frame_counter
    }

    pub fn stats(&self) -> &[FrameStats] {
        &self.stats
    }

    pub fn bytes_estimate(&self) -> usize {
        self.len() * record_floats(self.classes, self.d_model()) * 4
    }

    pub fn query_fov(&self, frame: &CameraFrame<T>, test: FovTest) -> FovSplit<T> {
        let (inside_ids, outside_ids): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|&i| in_fov(&self.batch.primitives[i], frame, test));
        FovSplit { inside: self.batch.select(&inside_ids), inside_ids, outside_ids }
    }

    /// One recurrence step with a new local prediction.
    pub fn update(
        &mut self,
        local: &PrimitiveBatch<T>,
        frame: &CameraFrame<T>,
        weights: &EncoderWeights<T>,
        cfg: &MemoryConfig,
    ) -> Result<()> {
        let split = self.query_fov(frame, cfg.fov);
        if local.is_empty() {
            self.finish_frame(split.inside_ids.len(), 0);
            return Ok(());
        }
        if local.d_model() != self.d_model() {
            return invalid(format!("local feature width {} != memory width {}", local.d_model(), self.d_model()));
        }
        let mut current = local.clone();
        current.recompute_confidence(&cfg.confidence)?;
        let mut history = split.inside.clone();
        history.recompute_confidence(&cfg.confidence)?;

        let (cur, hist) = dte_step(&current, &history, weights, cfg.n_blocks, &cfg.confidence)?;
        let mut union = cur.concat(&hist)?;

        // outside-FOV primitives sharing a cell with the new content join its group
        let touched: BTreeSet<Cell> =
            assign_voxels_from(&union.primitives, &self.origin, self.voxel_size).into_iter().collect();
        let (colliding, untouched): (Vec<usize>, Vec<usize>) =
            split.outside_ids.iter().partition(|&&i| touched.contains(&self.cells[i]));
        if !colliding.is_empty() {
            let mut extra = self.batch.select(&colliding);
            extra.recompute_confidence(&cfg.confidence)?;
            union = union.concat(&extra)?;
        }
        let (fused, _) = fuse_batch_from(&union, &self.origin, &cfg.fusion)?;
        let merged = self.batch.select(&untouched).concat(&fused)?;
        let (batch, cells) = settle(merged, &self.origin, self.voxel_size, cfg)?;
        self.batch = batch;
        self.cells = cells;
        self.reindex()?;
        self.finish_frame(split.inside_ids.len(), local.len());
        Ok(())
    }

    /// Fusion cell of every stored mean recomputed from scratch; used to
    /// audit the per-cell uniqueness invariant.
    pub fn recomputed_cells(&self) -> Vec<Cell> {
        self.batch.primitives.iter().map(|g| cell_of(&g.mean, &self.origin, self.voxel_size)).collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(GMEM_MAGIC)?;
        w.write_u32::<LittleEndian>(GMEM_VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u32::<LittleEndian>(self.d_model() as u32)?;
        w.write_u32::<LittleEndian>(self.classes as u32)?;
        w.write_f64::<LittleEndian>(self.voxel_size.as_f64())?;
        for v in self.origin.iter() {
            w.write_f64::<LittleEndian>(v.as_f64())?;
        }
        for (i, g) in self.batch.primitives.iter().enumerate() {
            let row = self.batch.features.row(i);
            let vals = g
                .mean
                .iter()
                .chain(g.scale.iter())
                .chain(g.rotation.0.iter())
                .chain(std::iter::once(&g.opacity))
                .chain(g.logits.iter())
                .chain(row.iter());
            for v in vals {
                w.write_f32::<LittleEndian>(v.as_f32())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint; confidences are recomputed with `conf`. Cells are
    /// rebuilt from the stored means and must be unique.
    pub fn read_from<R: Read>(r: &mut R, conf: &ConfidenceConfig) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof_as_format)?;
        if &magic != GMEM_MAGIC {
            return Err(Error::Format(format!("bad gmem magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof_as_format)?;
        if version != GMEM_VERSION {
            return Err(Error::Format(format!("unsupported gmem version {version}")));
        }
        let count = r.read_u64::<LittleEndian>().map_err(eof_as_format)? as usize;
        let d_model = r.read_u32::<LittleEndian>().map_err(eof_as_format)? as usize;
        let classes = r.read_u32::<LittleEndian>().map_err(eof_as_format)? as usize;
        if classes < 2 {
            return Err(Error::Format(format!("gmem class count {classes} < 2")));
        }
        let voxel_size = r.read_f64::<LittleEndian>().map_err(eof_as_format)?;
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(Error::Format(format!("gmem voxel size {voxel_size} invalid")));
        }
        let mut origin = Vec3::zeros();
        for a in 0..3 {
            origin[a] = T::lit(r.read_f64::<LittleEndian>().map_err(eof_as_format)?);
        }
        let rec = record_floats(classes, d_model);
        let mut primitives = Vec::with_capacity(count.min(1 << 24));
        let mut feats: Vec<T> = Vec::with_capacity(count.min(1 << 24) * d_model);
        let mut buf = vec![T::zero(); rec];
        for i in 0..count {
            for v in buf.iter_mut() {
                *v = T::of_f32(r.read_f32::<LittleEndian>().map_err(eof_as_format)?);
            }
            let g = GaussianPrimitive {
                mean: Vec3::new(buf[0], buf[1], buf[2]),
                scale: Vec3::new(buf[3], buf[4], buf[5]),
                rotation: Quat([buf[6], buf[7], buf[8], buf[9]]),
                opacity: buf[10],
                logits: buf[11..11 + classes - 1].to_vec(),
            };
            validate_record(&g).map_err(|m| Error::Format(format!("record {i}: {m}")))?;
            feats.extend_from_slice(&buf[11 + classes - 1..]);
            primitives.push(g);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after gmem records".into()));
        }
        let features = DMatrix::from_row_slice(count, d_model, &feats);
        let batch = PrimitiveBatch::with_confidence(primitives, features, conf)?;
        let voxel_size = T::lit(voxel_size);
        let cells = assign_voxels_from(&batch.primitives, &origin, voxel_size);
        let mut mem = Self {
            batch,
            cells,
            cell_index: HashMap::new(),
            origin,
            voxel_size,
            classes,
            frame_counter: 0,
            stats: Vec::new(),
        };
        mem.reindex().map_err(|e| Error::Format(e.to_string()))?;
        Ok(mem)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, conf: &ConfidenceConfig) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?), conf)
    }
}

/// Rounds every stored value to f32, the checkpoint precision.
fn quantize<T: Real>(mut batch: PrimitiveBatch<T>) -> PrimitiveBatch<T> {
    let q = |v: &mut T| *v = T::of_f32(v.as_f32());
    for g in &mut batch.primitives {
        g.mean.iter_mut().chain(g.scale.iter_mut()).chain(g.rotation.0.iter_mut()).for_each(q);
        q(&mut g.opacity);
        g.logits.iter_mut().for_each(q);
    }
    batch.features.iter_mut().for_each(q);
    batch
}

/// Brings a batch to its stored form: f32-rounded values, one primitive per
/// cell of its stored mean, sorted by cell. Rounding can push a fused mean
/// across a cell face; such collisions are fused again until none remain.
/// Primitives that never collide keep their values.
fn settle<T: Real>(
    batch: PrimitiveBatch<T>,
    origin: &Vec3<T>,
    voxel_size: T,
    cfg: &MemoryConfig,
) -> Result<(PrimitiveBatch<T>, Vec<Cell>)> {
    let mut batch = quantize(batch);
    loop {
        let cells = assign_voxels_from(&batch.primitives, origin, voxel_size);
        let groups = group_by_cell(&cells);
        if groups.len() == cells.len() {
            let order: Vec<usize> = groups.values().map(|ids| ids[0]).collect();
            let mut batch = batch.select(&order);
            batch.recompute_confidence(&cfg.confidence)?;
            return Ok((batch, groups.into_keys().collect()));
        }
        let (shared, single): (Vec<Vec<usize>>, Vec<Vec<usize>>) = groups.into_values().partition(|ids| ids.len() > 1);
        let shared: Vec<usize> = shared.concat();
        let single: Vec<usize> = single.concat();
        let mut colliding = batch.select(&shared);
        colliding.recompute_confidence(&cfg.confidence)?;
        let (refused, _) = fuse_batch_from(&colliding, origin, &cfg.fusion)?;
        batch = batch.select(&single).concat(&quantize(refused))?;
    }
}

fn validate_record<T: Real>(g: &GaussianPrimitive<T>) -> std::result::Result<(), String> {
    let finite = g
        .mean
        .iter()
        .chain(g.scale.iter())
        .chain(g.rotation.0.iter())
        .chain(g.logits.iter())
        .all(|v| v.finite());
    if !finite {
        return Err("non-finite attribute".into());
    }
    if g.scale.iter().any(|&s| s <= T::zero()) {
        return Err("non-positive scale".into());
    }
    if !(g.opacity >= T::zero() && g.opacity <= T::one()) {
        return Err(format!("opacity {} outside [0, 1]", g.opacity));
    }
    if (g.rotation.norm() - T::one()).abs() > T::lit(1e-3) {
        return Err("rotation is not a unit quaternion".into());
    }
    Ok(())
}

/// Append-only baseline memory: every local prediction is concatenated.
#[derive(Clone, Debug)]
pub struct AppendOnlyMemory<T: Real> {
    batch: PrimitiveBatch<T>,
    stats: Vec<FrameStats>,
    classes: usize,
}

impl<T: Real> AppendOnlyMemory<T> {
    pub fn new(d_model: usize, classes: usize) -> Self {
        Self { batch: PrimitiveBatch::empty(d_model), stats: Vec::new(), classes }
    }

    pub fn push(&mut self, local: &PrimitiveBatch<T>, frame: &CameraFrame<T>, fov: FovTest) -> Result<()> {
        let inside = self.batch.primitives.iter().filter(|g| in_fov(g, frame, fov)).count();
        self.batch = self.batch.concat(local)?;
        let count = self.batch.len();
        self.stats.push(FrameStats {
            frame: self.stats.len() as u64 + 1,
            count,
            bytes: count * record_floats(self.classes, self.batch.d_model()) * 4,
            inside_fov: inside,
            local_count: local.len(),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive<T>] {
        &self.batch.primitives
    }

    pub fn stats(&self) -> &[FrameStats] {
        &self.stats
    }
}
