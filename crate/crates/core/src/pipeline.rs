//! End-to-end runs on synthetic scenes: per-frame local prediction, the
//! memory recurrence, rendering and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attn::{dte_step, EncoderWeights};
use crate::batch::PrimitiveBatch;
use crate::camera::CameraFrame;
use crate::cavf::{fuse_batch, FusionConfig};
use crate::conf::ConfidenceConfig;
use crate::error::{invalid, Error, Result};
use crate::eval::{extend_mask, local_mask, Confusion, MetricReport};
use crate::gaussian::GaussianPrimitive;
use crate::grid::{GridGeometry, VoxelGrid};
use crate::memory::{AppendOnlyMemory, FovTest, GaussianMemory, MemoryConfig};
use crate::splat::{argmax_labels, render, RenderOptions, Truncation};
use crate::synth::{generate_scene, generate_trajectory, stub_predict, NoiseConfig, SceneSpec, StubOptions, TrajectoryOptions, CLASS_NAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Local,
    Embodied,
    EmbodiedConcatBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seed: u64,
    pub n_blocks: usize,
    /// Keep the randomly initialized refinement head; when false it is zeroed
    /// so untrained weights cannot move the primitives.
    pub refine: bool,
    /// Optional `.wts` file replacing the seeded initialization.
    pub weights: Option<PathBuf>,
    /// Monocular self-refinement in local mode.
    pub local_refinement: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_model: 32, n_heads: 4, d_ff: 64, seed: 42, n_blocks: 2, refine: false, weights: None, local_refinement: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Truncation radius in standard deviations; 0 disables truncation.
    pub truncation_sigmas: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { truncation_sigmas: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Scene file; the built-in furnished room when absent.
    pub scene: Option<PathBuf>,
    pub trajectory_seed: u64,
    pub predict_seed: u64,
    pub frames: usize,
    pub output_dir: Option<PathBuf>,
    pub fov: FovTest,
    pub noise: NoiseConfig,
    pub confidence: ConfidenceConfig,
    pub fusion: FusionConfig,
    pub encoder: EncoderConfig,
    pub stub: StubOptions,
    pub trajectory: TrajectoryOptions,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Embodied,
            scene: None,
            trajectory_seed: 0,
            predict_seed: 0,
            frames: 30,
            output_dir: None,
            fov: FovTest::Mean,
            noise: NoiseConfig::default(),
            confidence: ConfidenceConfig::default(),
            fusion: FusionConfig::default(),
            encoder: EncoderConfig::default(),
            stub: StubOptions::default(),
            trajectory: TrajectoryOptions::default(),
            render: RenderConfig::default(),
        }
    }
}

fn field_err(field: &str, e: Error) -> Error {
    Error::Config(format!("{field}: {e}"))
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // relative paths in a config file are relative to the file
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.scene, &mut cfg.encoder.weights].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("frames: must be >= 1".into()));
        }
        if let Some(p) = &self.scene {
            if !p.exists() {
                return Err(Error::Config(format!("scene: {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.encoder.weights {
            if !p.exists() {
                return Err(Error::Config(format!("encoder.weights: {} does not exist", p.display())));
            }
        }
        if !(self.render.truncation_sigmas >= 0.0 && self.render.truncation_sigmas.is_finite()) {
            return Err(Error::Config("render.truncation_sigmas: must be >= 0".into()));
        }
        self.noise.validate().map_err(|e| field_err("noise", e))?;
        self.confidence.validate().map_err(|e| field_err("confidence", e))?;
        self.fusion.validate().map_err(|e| field_err("fusion", e))?;
        self.stub.validate().map_err(|e| field_err("stub", e))?;
        if self.stub.d_model != self.encoder.d_model {
            return Err(Error::Config(format!(
                "stub.d_model ({}) must equal encoder.d_model ({})",
                self.stub.d_model, self.encoder.d_model
            )));
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        match &self.scene {
            Some(p) => SceneSpec::load(p),
            None => Ok(SceneSpec::default_room()),
        }
    }

    pub fn memory_config(&self) -> MemoryConfig {
        MemoryConfig {
            fusion: self.fusion.clone(),
            confidence: self.confidence.clone(),
            n_blocks: self.encoder.n_blocks,
            fov: self.fov,
        }
    }

    pub fn render_options(&self, classes: usize) -> RenderOptions<f64> {
        let truncation = if self.render.truncation_sigmas == 0.0 {
            Truncation::Disabled
        } else {
            Truncation::Sigmas(self.render.truncation_sigmas)
        };
        RenderOptions { classes, truncation, ..RenderOptions::default() }
    }

    pub fn weights(&self, classes: usize) -> Result<EncoderWeights<f64>> {
        let e = &self.encoder;
        let w = match &e.weights {
            Some(p) => EncoderWeights::load(p)?,
            None => EncoderWeights::init(e.d_model, e.n_heads, e.d_ff, classes, e.seed)
                .map_err(|err| field_err("encoder", err))?,
        };
        if w.d_model != e.d_model || w.classes != classes {
            return Err(Error::Config(format!(
                "encoder weights are {}-wide for {} classes, run needs {} and {}",
                w.d_model, w.classes, e.d_model, classes
            )));
        }
        Ok(if e.refine { w } else { w.without_refinement() })
    }
}

/// Per-frame seed of the local predictor.
pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    seed ^ (frame as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub local_count: usize,
    pub memory_count: usize,
    pub inside_fov: usize,
    pub bytes: usize,
    /// Local-protocol metrics of this frame (local mode only).
    pub metrics: Option<MetricReport>,
    pub runtime_ms: f64,
}

pub struct RunOutput {
    pub mode: Mode,
    pub report: MetricReport,
    pub frames: Vec<FrameRecord>,
    pub ground_truth: VoxelGrid<f64>,
    pub prediction: VoxelGrid<f64>,
    pub cameras: Vec<CameraFrame<f64>>,
    pub memory: Option<GaussianMemory<f64>>,
    /// Final primitives of the append-only baseline.
    pub baseline: Option<Vec<GaussianPrimitive<f64>>>,
    /// Per-frame label predictions in local mode.
    pub local_predictions: Vec<VoxelGrid<f64>>,
}

struct Setup {
    gt: VoxelGrid<f64>,
    frames: Vec<CameraFrame<f64>>,
    weights: EncoderWeights<f64>,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    cfg.validate()?;
    let spec = cfg.scene_spec()?;
    let gt = generate_scene::<f64>(&spec)?;
    let frames = generate_trajectory(&gt, cfg.frames, cfg.trajectory_seed, &cfg.trajectory)?;
    let weights = cfg.weights(gt.classes)?;
    Ok(Setup { gt, frames, weights })
}

fn predict(cfg: &RunConfig, gt: &VoxelGrid<f64>, frame: &CameraFrame<f64>, f: usize) -> Result<PrimitiveBatch<f64>> {
    stub_predict(gt, frame, &cfg.noise, frame_seed(cfg.predict_seed, f), &cfg.stub, &cfg.confidence)
}

fn render_labels(cfg: &RunConfig, geom: &GridGeometry<f64>, prims: &[GaussianPrimitive<f64>], classes: usize) -> Result<VoxelGrid<f64>> {
    let out = render(geom, prims, &cfg.render_options(classes))?;
    argmax_labels(&out.grid)
}

/// Renders the stored primitives of a memory onto a grid.
pub fn render_memory(
    memory: &GaussianMemory<f64>,
    geom: &GridGeometry<f64>,
    opts: &RenderOptions<f64>,
) -> Result<VoxelGrid<f64>> {
    argmax_labels(&render(geom, memory.primitives(), opts)?.grid)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Monocular protocol: every frame is predicted, refined, fused and
/// evaluated on its own frustum.
pub fn run_local(cfg: &RunConfig) -> Result<RunOutput> {
    if cfg.mode != Mode::Local {
        return invalid(format!("run_local called with mode {:?}", cfg.mode));
    }
    let Setup { gt, frames, weights } = setup(cfg)?;
    let geom = gt.geometry.clone();
    let mut total = Confusion::new(gt.classes);
    let mut observed = vec![false; geom.len()];
    let mut records = Vec::with_capacity(frames.len());
    let mut local_predictions = Vec::with_capacity(frames.len());
    for (f, frame) in frames.iter().enumerate() {
        let t0 = Instant::now();
        let mut batch = predict(cfg, &gt, frame, f)?;
        let local_count = batch.len();
        if !batch.is_empty() && cfg.encoder.local_refinement {
            batch = dte_step(&batch, &PrimitiveBatch::empty(batch.d_model()), &weights, cfg.encoder.n_blocks, &cfg.confidence)?.0;
        }
        let fused = if batch.is_empty() { batch } else { fuse_batch(&batch, &cfg.fusion)?.0 };
        let labels = render_labels(cfg, &geom, &fused.primitives, gt.classes)?;
        let mask = local_mask(&geom, frame);
        let mut c = Confusion::new(gt.classes);
        c.accumulate(&labels, &gt, &mask)?;
        total.accumulate(&labels, &gt, &mask)?;
        extend_mask(&mut observed, &geom, frame);
        let metrics = (c.total() > 0).then(|| {
            let mut r = c.report();
            r.observed_fraction = c.total() as f64 / geom.len() as f64;
            r
        });
        records.push(FrameRecord {
            frame: f,
            local_count,
            memory_count: fused.len(),
            inside_fov: fused.len(),
            bytes: 0,
            metrics,
            runtime_ms: ms(t0),
        });
        local_predictions.push(labels);
    }
    if total.total() == 0 {
        return invalid("no voxel fell inside any frustum");
    }
    let mut report = total.report();
    report.observed_fraction = observed.iter().filter(|&&m| m).count() as f64 / geom.len() as f64;
    let prediction = local_predictions.last().cloned().expect("at least one frame");
    Ok(RunOutput {
        mode: cfg.mode,
        report,
        frames: records,
        ground_truth: gt,
        prediction,
        cameras: frames,
        memory: None,
        baseline: None,
        local_predictions,
    })
}

/// Embodied protocol: the memory (or the append-only baseline) accumulates
/// over the trajectory and the final render is scored on the observed mask.
pub fn run_embodied(cfg: &RunConfig) -> Result<RunOutput> {
    if cfg.mode == Mode::Local {
        return invalid("run_embodied called with mode local");
    }
    let Setup { gt, frames, weights } = setup(cfg)?;
    let geom = gt.geometry.clone();
    let mem_cfg = cfg.memory_config();
    let mut records = Vec::with_capacity(frames.len());
    let mut observed = vec![false; geom.len()];
    let mut memory: Option<GaussianMemory<f64>> = None;
    let mut baseline = AppendOnlyMemory::new(cfg.encoder.d_model, gt.classes);
    for (f, frame) in frames.iter().enumerate() {
        let t0 = Instant::now();
        let local = predict(cfg, &gt, frame, f)?;
        extend_mask(&mut observed, &geom, frame);
        let stats = match cfg.mode {
            Mode::EmbodiedConcatBaseline => {
                baseline.push(&local, frame, cfg.fov)?;
                baseline.stats().last().cloned()
            }
            _ => {
                match memory.as_mut() {
                    Some(m) => m.update(&local, frame, &weights, &mem_cfg)?,
                    // frames before the first nonempty prediction leave no memory
                    None if local.is_empty() => {}
                    None => memory = Some(GaussianMemory::init(&local, &mem_cfg)?),
                }
                memory.as_ref().and_then(|m| m.stats().last().cloned())
            }
        };
        let (memory_count, inside_fov, bytes) = stats.map_or((0, 0, 0), |s| (s.count, s.inside_fov, s.bytes));
        records.push(FrameRecord {
            frame: f,
            local_count: local.len(),
            memory_count,
            inside_fov,
            bytes,
            metrics: None,
            runtime_ms: ms(t0),
        });
    }
    let opts = cfg.render_options(gt.classes);
    let (prediction, memory, baseline) = match cfg.mode {
        Mode::EmbodiedConcatBaseline => {
            let labels = argmax_labels(&render(&geom, baseline.primitives(), &opts)?.grid)?;
            (labels, None, Some(baseline.primitives().to_vec()))
        }
        _ => {
            let Some(m) = memory else {
                return invalid("no frame produced any primitive");
            };
            // score the memory as persisted, so a reloaded checkpoint renders identically
            let mut bytes = Vec::new();
            m.write_to(&mut bytes)?;
            let m = GaussianMemory::read_from(&mut bytes.as_slice(), &cfg.confidence)?;
            (render_memory(&m, &geom, &opts)?, Some(m), None)
        }
    };
    let mut c = Confusion::new(gt.classes);
    c.accumulate(&prediction, &gt, &observed)?;
    if c.total() == 0 {
        return invalid("observed mask is empty");
    }
    let mut report = c.report();
    report.observed_fraction = c.total() as f64 / geom.len() as f64;
    Ok(RunOutput {
        mode: cfg.mode,
        report,
        frames: records,
        ground_truth: gt,
        prediction,
        cameras: frames,
        memory,
        baseline,
        local_predictions: Vec::new(),
    })
}

pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    match cfg.mode {
        Mode::Local => run_local(cfg),
        _ => run_embodied(cfg),
    }
}

/// Deterministic per-frame table.
pub fn frames_csv(out: &RunOutput) -> String {
    let mut s = String::from("frame,local_count,memory_count,inside_fov,bytes");
    if out.mode == Mode::Local {
        s.push(',');
        s.push_str(&MetricReport::csv_header(&CLASS_NAMES));
    }
    s.push('\n');
    for r in &out.frames {
        s.push_str(&format!("{},{},{},{},{}", r.frame, r.local_count, r.memory_count, r.inside_fov, r.bytes));
        if out.mode == Mode::Local {
            match &r.metrics {
                Some(m) => s.push_str(&format!(",{}", m.csv_row())),
                None => s.push_str(&",".repeat(4 + CLASS_NAMES.len())),
            }
        }
        s.push('\n');
    }
    s
}

pub fn timing_csv(out: &RunOutput) -> String {
    let mut s = String::from("frame,runtime_ms\n");
    for r in &out.frames {
        s.push_str(&format!("{},{:.3}\n", r.frame, r.runtime_ms));
    }
    s
}

pub fn metrics_csv(out: &RunOutput) -> String {
    format!("{}\n{}\n", MetricReport::csv_header(&CLASS_NAMES), out.report.csv_row())
}

pub fn report_text(out: &RunOutput) -> String {
    let mut s = format!("mode = {}\n", mode_name(out.mode));
    s.push_str(&format!("frames = {}\n", out.frames.len()));
    if let Some(r) = out.frames.last() {
        s.push_str(&format!("final_memory_count = {}\n", r.memory_count));
    }
    s.push_str(&out.report.to_text(&CLASS_NAMES));
    s
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Local => "local",
        Mode::Embodied => "embodied",
        Mode::EmbodiedConcatBaseline => "embodied_concat_baseline",
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(contents)?;
    Ok(())
}

/// Writes the artifacts of a run into `dir`:
/// `metrics.csv`, `frames.csv`, `timing.csv`, `report.txt`, `ground_truth.vgrid`
/// and, depending on the mode, `final.gmem` + `final.vgrid` or one
/// `frame_NNN.vgrid` per local prediction.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(&dir.join("metrics.csv"), metrics_csv(out).as_bytes())?;
    write_file(&dir.join("frames.csv"), frames_csv(out).as_bytes())?;
    write_file(&dir.join("timing.csv"), timing_csv(out).as_bytes())?;
    write_file(&dir.join("report.txt"), report_text(out).as_bytes())?;
    out.ground_truth.save(dir.join("ground_truth.vgrid"))?;
    match out.mode {
        Mode::Local => {
            for (f, g) in out.local_predictions.iter().enumerate() {
                g.save(dir.join(format!("frame_{f:03}.vgrid")))?;
            }
        }
        _ => {
            out.prediction.save(dir.join("final.vgrid"))?;
            if let Some(m) = &out.memory {
                m.save(dir.join("final.gmem"))?;
            }
        }
    }
    Ok(())
}
