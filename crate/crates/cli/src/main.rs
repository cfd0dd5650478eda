//! `splatmem` command line driver.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 malformed input
//! file, 3 internal invariant violation. `SPLATMEM_THREADS` caps the worker
//! thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use splatmem::conf::ConfidenceConfig;
use splatmem::grid::{GridGeometry, VoxelGrid};
use splatmem::memory::{GaussianMemory, MemoryConfig};
use splatmem::pipeline::{self, Mode, RunConfig};
use splatmem::splat::{argmax_labels, render, RenderOptions, Truncation};
use splatmem::synth::{SceneSpec, CLASS_NAMES};
use splatmem::Error;

#[derive(Parser)]
#[command(name = "splatmem", version, about = "Gaussian memory semantic occupancy on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-frame monocular prediction scored on each frame's frustum.
    RunLocal(RunArgs),
    /// Memory recurrence over a trajectory scored on the observed region.
    RunEmbodied {
        #[command(flatten)]
        run: RunArgs,
        /// Append-only concatenation instead of the fused memory.
        #[arg(long)]
        baseline: bool,
    },
    /// Summary of a `.gmem` checkpoint.
    Stats { gmem: PathBuf },
    /// Renders a `.gmem` checkpoint to a `.vgrid` grid.
    Render {
        gmem: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Scene file whose grid geometry is used; the built-in room otherwise.
        #[arg(long, conflicts_with = "like")]
        scene: Option<PathBuf>,
        /// Reuse the geometry of an existing `.vgrid`.
        #[arg(long)]
        like: Option<PathBuf>,
        /// Write class probabilities instead of argmax labels.
        #[arg(long)]
        probabilities: bool,
        /// Truncation radius in standard deviations; 0 disables it.
        #[arg(long, default_value_t = 3.0)]
        truncation: f64,
    },
    /// Re-fuses the primitives of a `.gmem` checkpoint on a new cell size.
    Fuse {
        gmem: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.12)]
        voxel_size: f64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; explicit flags take precedence.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    trajectory_seed: Option<u64>,
    #[arg(long)]
    predict_seed: Option<u64>,
    #[arg(long)]
    depth_sigma: Option<f64>,
    #[arg(long)]
    logit_noise: Option<f64>,
    #[arg(long)]
    flip_prob: Option<f64>,
    #[arg(long)]
    fusion_voxel: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    encoder_seed: Option<u64>,
    /// Keep the seeded refinement head instead of zeroing it.
    #[arg(long)]
    refine: bool,
    /// Path to encoder weights (`.wts`).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    truncation: Option<f64>,
}

impl RunArgs {
    fn config(&self, mode: Mode) -> splatmem::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.config.is_some() && !mode_compatible(cfg.mode, mode) {
            return Err(Error::Config(format!(
                "config mode {} does not match this subcommand",
                pipeline::mode_name(cfg.mode)
            )));
        }
        cfg.mode = if self.config.is_some() && cfg.mode != Mode::Local && mode != Mode::Local {
            if mode == Mode::EmbodiedConcatBaseline { mode } else { cfg.mode }
        } else {
            mode
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        if self.scene.is_some() {
            cfg.scene = self.scene.clone();
        }
        if self.out.is_some() {
            cfg.output_dir = self.out.clone();
        }
        if self.weights.is_some() {
            cfg.encoder.weights = self.weights.clone();
        }
        set!(self.frames, cfg.frames);
        set!(self.trajectory_seed, cfg.trajectory_seed);
        set!(self.predict_seed, cfg.predict_seed);
        set!(self.depth_sigma, cfg.noise.depth_sigma);
        set!(self.logit_noise, cfg.noise.logit_noise);
        set!(self.flip_prob, cfg.noise.flip_prob);
        set!(self.fusion_voxel, cfg.fusion.voxel_size);
        set!(self.temperature, cfg.fusion.temperature);
        set!(self.n_blocks, cfg.encoder.n_blocks);
        set!(self.encoder_seed, cfg.encoder.seed);
        set!(self.truncation, cfg.render.truncation_sigmas);
        if self.refine {
            cfg.encoder.refine = true;
        }
        Ok(cfg)
    }
}

fn mode_compatible(file: Mode, cmd: Mode) -> bool {
    (file == Mode::Local) == (cmd == Mode::Local)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Io(_) => 1,
        Error::Format(_) => 2,
        Error::Invariant(_) => 3,
    }
}

fn run(cfg: RunConfig) -> splatmem::Result<()> {
    let out = pipeline::run(&cfg)?;
    if let Some(dir) = &cfg.output_dir {
        pipeline::write_artifacts(&out, dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    }
    print!("{}", pipeline::report_text(&out));
    Ok(())
}

fn geometry(scene: Option<&Path>, like: Option<&Path>) -> splatmem::Result<GridGeometry<f64>> {
    if let Some(p) = like {
        return Ok(VoxelGrid::<f64>::load(p)?.geometry);
    }
    let spec = match scene {
        Some(p) => SceneSpec::load(p)?,
        None => SceneSpec::default_room(),
    };
    spec.geometry()
}

fn stats_report(mem: &GaussianMemory<f64>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "count = {}", mem.len());
    let _ = writeln!(s, "bytes = {}", mem.bytes_estimate());
    let _ = writeln!(s, "d_model = {}", mem.d_model());
    let _ = writeln!(s, "classes = {}", mem.classes());
    let _ = writeln!(s, "voxel_size = {}", mem.voxel_size());
    let o = mem.origin();
    let _ = writeln!(s, "origin = [{}, {}, {}]", o.x, o.y, o.z);
    if let Some(first) = mem.primitives().first() {
        let (lo, hi) = mem.primitives().iter().fold((first.mean, first.mean), |(lo, hi), g| (lo.inf(&g.mean), hi.sup(&g.mean)));
        let _ = writeln!(s, "bbox_min = [{:.4}, {:.4}, {:.4}]", lo.x, lo.y, lo.z);
        let _ = writeln!(s, "bbox_max = [{:.4}, {:.4}, {:.4}]", hi.x, hi.y, hi.z);
    }
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for g in mem.primitives() {
        *hist.entry(g.argmax_class()).or_default() += 1;
    }
    for (class, n) in hist {
        let name = CLASS_NAMES.get(class).map_or_else(|| format!("class_{class}"), |n| n.to_string());
        let _ = writeln!(s, "argmax_{name} = {n}");
    }
    s
}

fn dispatch(cli: Cli) -> splatmem::Result<()> {
    match cli.command {
        Command::RunLocal(args) => run(args.config(Mode::Local)?),
        Command::RunEmbodied { run: args, baseline } => {
            run(args.config(if baseline { Mode::EmbodiedConcatBaseline } else { Mode::Embodied })?)
        }
        Command::Stats { gmem } => {
            let mem = GaussianMemory::<f64>::load(&gmem, &ConfidenceConfig::default())?;
            print!("{}", stats_report(&mem));
            Ok(())
        }
        Command::Render { gmem, out, scene, like, probabilities, truncation } => {
            if !(truncation >= 0.0 && truncation.is_finite()) {
                return Err(Error::Config("--truncation must be >= 0".into()));
            }
            let mem = GaussianMemory::<f64>::load(&gmem, &ConfidenceConfig::default())?;
            let geom = geometry(scene.as_deref(), like.as_deref())?;
            let opts = RenderOptions {
                classes: mem.classes(),
                truncation: if truncation == 0.0 { Truncation::Disabled } else { Truncation::Sigmas(truncation) },
                ..RenderOptions::default()
            };
            let grid = render(&geom, mem.primitives(), &opts)?.grid;
            let grid = if probabilities { grid } else { argmax_labels(&grid)? };
            grid.save(&out)
        }
        Command::Fuse { gmem, out, voxel_size, temperature } => {
            let mem = GaussianMemory::<f64>::load(&gmem, &ConfidenceConfig::default())?;
            let mut cfg = MemoryConfig::default();
            cfg.fusion.voxel_size = voxel_size;
            cfg.fusion.temperature = temperature;
            cfg.fusion.validate().map_err(|e| Error::Config(e.to_string()))?;
            if mem.is_empty() {
                return mem.save(&out);
            }
            let fused = GaussianMemory::init(mem.batch(), &cfg)?;
            println!("fused {} primitives into {}", mem.len(), fused.len());
            fused.save(&out)
        }
    }
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("SPLATMEM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: SPLATMEM_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
