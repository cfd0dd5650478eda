use std::path::Path;

use splatmem::pipeline::{Mode, RunConfig};
use splatmem::synth::SceneSpec;

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn bundled_room_is_the_default_room() {
    assert_eq!(SceneSpec::load(configs().join("room.toml")).unwrap(), SceneSpec::default_room());
}

#[test]
fn bundled_run_configs_load() {
    let emb = RunConfig::load(configs().join("embodied.toml")).unwrap();
    assert_eq!(emb.mode, Mode::Embodied);
    assert_eq!(emb.fusion.voxel_size, 0.08);
    assert!(emb.scene.as_ref().unwrap().is_absolute());
    assert_eq!(emb.scene_spec().unwrap(), SceneSpec::default_room());
    let local = RunConfig::load(configs().join("local.toml")).unwrap();
    assert_eq!(local.mode, Mode::Local);
    assert_eq!(local.frames, 10);
}

#[test]
fn default_config_round_trips_through_toml() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
}
