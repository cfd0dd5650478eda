use std::collections::{BTreeSet, HashSet};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatmem::batch::PrimitiveBatch;
use splatmem::camera::CameraFrame;
use splatmem::conf::ConfidenceConfig;
use splatmem::gaussian::GaussianPrimitive;
use splatmem::geometry::{Quat, Vec3};
use splatmem::memory::{FovTest, GaussianMemory, MemoryConfig};
use splatmem::pipeline::{frame_seed, run, RunConfig};
use splatmem::synth::{generate_scene, generate_trajectory, stub_predict};

fn cell(p: &Vec3<f64>, vs: f64) -> [i64; 3] {
    [(p.x / vs).floor() as i64, (p.y / vs).floor() as i64, (p.z / vs).floor() as i64]
}

fn random_batch(seed: u64, n: usize, extent: f64) -> PrimitiveBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = (0..n)
        .map(|_| {
            let mean = Vec3::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent), rng.random_range(0.0..extent));
            let logits = (0..11).map(|_| rng.random_range(-3.0..3.0)).collect();
            let q = Quat::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5);
            GaussianPrimitive::new(mean, Vec3::new(0.05, 0.08, 0.03), q, rng.random_range(0.1..1.0), logits).unwrap()
        })
        .collect();
    let features = DMatrix::from_fn(n, 32, |_, _| rng.random_range(-1.0..1.0));
    PrimitiveBatch::with_confidence(prims, features, &ConfidenceConfig::default()).unwrap()
}

#[test]
fn init_count_matches_group_by_oracle() {
    for seed in 0..5 {
        let batch = random_batch(seed, 500, 1.0);
        let oracle: HashSet<_> = batch.primitives.iter().map(|g| cell(&g.mean, 0.12)).collect();
        let mem = GaussianMemory::init(&batch, &MemoryConfig::default()).unwrap();
        assert_eq!(mem.len(), oracle.len(), "seed {seed}");
        let stored: HashSet<_> = mem.cells().iter().copied().collect();
        assert_eq!(stored.len(), mem.len());
        assert_eq!(mem.recomputed_cells(), mem.cells());
    }
}

#[test]
fn fov_partition_matches_projection_oracle() {
    let batch = random_batch(11, 1000, 4.0);
    let mut cfg = MemoryConfig::default();
    // cells small enough that almost nothing fuses, so the stored means cover the volume
    cfg.fusion.voxel_size = 0.01;
    let mem = GaussianMemory::init(&batch, &cfg).unwrap();
    let frame = CameraFrame::look_at(Vec3::new(0.2, 0.3, 1.5), Vec3::new(3.0, 3.5, 1.0), Vec3::z()).unwrap();
    let split = mem.query_fov(&frame, FovTest::Mean);

    let k = frame.intrinsics;
    let oracle: Vec<usize> = mem
        .primitives()
        .iter()
        .enumerate()
        .filter(|(_, g)| {
            let c = frame.rotation.transpose() * (g.mean - frame.translation);
            if c.z <= 0.0 {
                return false;
            }
            let u = k[(0, 0)] * c.x / c.z + k[(0, 1)] * c.y / c.z + k[(0, 2)];
            let v = k[(1, 1)] * c.y / c.z + k[(1, 2)];
            c.z >= frame.near && c.z <= frame.far && (0.0..640.0).contains(&u) && (0.0..480.0).contains(&v)
        })
        .map(|(i, _)| i)
        .collect();
    assert!(mem.len() > 900);
    assert!(!oracle.is_empty() && oracle.len() < mem.len());
    assert_eq!(split.inside_ids, oracle);
    assert_eq!(split.inside.len(), oracle.len());
    let mut all: Vec<usize> = split.inside_ids.iter().chain(&split.outside_ids).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..mem.len()).collect::<Vec<_>>());
}

/// Per-frame memory counts of the default 30-frame episode.
const EPISODE_COUNTS: [usize; 30] = [
    657, 1427, 1684, 1976, 2200, 2484, 2655, 2867, 3007, 3319, 3504, 3792, 3917, 4160, 4272, 4501, 4640, 4964, 5096,
    5355, 5487, 5723, 5802, 6048, 6101, 6223, 6249, 6296, 6307, 6333,
];

#[test]
fn default_episode_counts() {
    let cfg = RunConfig::default();
    let out = run(&cfg).unwrap();
    let counts: Vec<usize> = out.frames.iter().map(|f| f.memory_count).collect();
    assert_eq!(counts, EPISODE_COUNTS);
    assert!(counts.windows(2).all(|w| w[0] <= w[1]));

    let gt = generate_scene::<f64>(&cfg.scene_spec().unwrap()).unwrap();
    let frames = generate_trajectory(&gt, cfg.frames, cfg.trajectory_seed, &cfg.trajectory).unwrap();
    let mut explored = BTreeSet::new();
    for (f, frame) in frames.iter().enumerate() {
        let local = stub_predict(&gt, frame, &cfg.noise, frame_seed(cfg.predict_seed, f), &cfg.stub, &cfg.confidence).unwrap();
        explored.extend(local.primitives.iter().map(|g| cell(&g.mean, cfg.fusion.voxel_size)));
        assert!(counts[f] <= explored.len(), "frame {f}: {} > {}", counts[f], explored.len());
    }
    // the run hands back the memory as reloaded from its checkpoint, which
    // does not carry the frame counter
    let mem = out.memory.unwrap();
    assert_eq!(mem.len(), EPISODE_COUNTS[29]);
    assert_eq!(mem.frame_counter(), 0);
}
