use std::path::Path;
use std::process::{Command, Output};

fn splatmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatmem"))
        .args(args)
        .env("SPLATMEM_THREADS", "1")
        .output()
        .expect("spawn splatmem")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(splatmem(&["--help"]).status.code(), Some(0));
    assert_eq!(splatmem(&["--version"]).status.code(), Some(0));
    assert_eq!(splatmem(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(splatmem(&["run-local", "--frames", "many"]).status.code(), Some(1));
}

#[test]
fn embodied_run_is_deterministic_and_checkpoint_renders_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = splatmem(&["run-embodied", "--frames", "4", "--depth-sigma", "0.03", "-o", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["frames.csv", "metrics.csv", "final.gmem", "final.vgrid"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    let rendered = dir.path().join("r.vgrid");
    let o = splatmem(&[
        "render",
        p(&a.join("final.gmem")),
        "-o",
        p(&rendered),
        "--like",
        p(&a.join("ground_truth.vgrid")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&rendered).unwrap(), std::fs::read(a.join("final.vgrid")).unwrap());

    let o = splatmem(&["stats", p(&a.join("final.gmem"))]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let count: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("count = "))
        .and_then(|v| v.parse().ok())
        .unwrap();
    let metrics = std::fs::read_to_string(a.join("report.txt")).unwrap();
    assert!(metrics.contains(&format!("final_memory_count = {count}")));
}

#[test]
fn fuse_coarsens_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = splatmem(&["run-embodied", "--frames", "2", "--fusion-voxel", "0.08", "-o", p(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fused = dir.path().join("fused.gmem");
    let o = splatmem(&["fuse", p(&run.join("final.gmem")), "-o", p(&fused), "--voxel-size", "0.24"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let count = |path: &Path| -> usize {
        let o = splatmem(&["stats", p(path)]);
        String::from_utf8(o.stdout)
            .unwrap()
            .lines()
            .find_map(|l| l.strip_prefix("count = ").map(|v| v.parse().unwrap()))
            .unwrap()
    };
    assert!(count(&fused) < count(&run.join("final.gmem")));
}

#[test]
fn corrupted_checkpoint_exits_with_format_code() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(splatmem(&["run-embodied", "--frames", "1", "-o", p(&run)]).status.success());
    let gmem = run.join("final.gmem");
    let mut bytes = std::fs::read(&gmem).unwrap();
    bytes[0] ^= 0xff;
    let bad = dir.path().join("bad.gmem");
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(splatmem(&["stats", p(&bad)]).status.code(), Some(2));

    let truncated = dir.path().join("short.gmem");
    std::fs::write(&truncated, &std::fs::read(&gmem).unwrap()[..40]).unwrap();
    assert_eq!(splatmem(&["stats", p(&truncated)]).status.code(), Some(2));

    assert_eq!(splatmem(&["stats", p(&dir.path().join("missing.gmem"))]).status.code(), Some(1));
}

#[test]
fn config_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "mode = \"local\"\nframes = 2\n").unwrap();
    let o = splatmem(&["run-embodied", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));

    std::fs::write(&cfg, "frames = 2\nbogus_key = 1\n").unwrap();
    assert_eq!(splatmem(&["run-local", "--config", p(&cfg)]).status.code(), Some(1));

    assert_eq!(splatmem(&["run-local", "--frames", "0"]).status.code(), Some(1));
    assert_eq!(splatmem(&["run-embodied", "--fusion-voxel", "-1"]).status.code(), Some(1));
}

#[test]
fn local_run_writes_per_frame_grids() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("loc");
    let o = splatmem(&["run-local", "--frames", "2", "-o", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["frame_000.vgrid", "frame_001.vgrid", "frames.csv", "metrics.csv", "report.txt", "config.toml"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("frames.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn bad_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_splatmem"))
        .args(["stats", "x.gmem"])
        .env("SPLATMEM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
