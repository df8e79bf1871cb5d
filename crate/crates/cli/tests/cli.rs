use std::path::Path;
use std::process::{Command, Output};

use regmod::pipeline::model::load_head;
use regmod::plane::FeaturePlane;

fn regmod(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regmod"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = regmod(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = "height = 32\nwidth = 32\ndim = 8\ndim_out = 4\nk = 3\nrank = 1\nseed = 1\n";

fn prepare(dir: &Path) {
    std::fs::write(dir.join("cfg.toml"), CONFIG).unwrap();
    ok(dir, &["scene", "--subdiv", "2", "--count", "4", "--mesh-out", "m.obj", "--poses-out", "p.toml"]);
    ok(dir, &["preprocess", "--mesh", "m.obj", "--poses", "p.toml", "--config", "cfg.toml", "--out", "c.pcch"]);
    ok(
        dir,
        &["synth", "--mesh", "m.obj", "--poses", "p.toml", "--config", "cfg.toml", "--cache", "c.pcch", "--out", "feats"],
    );
}

#[test]
fn full_pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    for i in 0..4 {
        assert!(dir.join(format!("feats/pose_{i:03}.fpln")).exists());
    }
    let stdout = ok(
        dir,
        &[
            "adapt", "--mesh", "m.obj", "--poses", "p.toml", "--config", "cfg.toml", "--cache", "c.pcch",
            "--features", "feats", "--iters", "20", "--out", "ck",
        ],
    );
    assert!(stdout.contains("L_register"));
    let metrics = std::fs::read_to_string(dir.join("ck/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 22);

    let stdout = ok(dir, &["infer", "--checkpoint", "ck", "--pose", "2", "--features", "feats", "--out", "out.fpln"]);
    assert!(stdout.contains("merged head parameters: 16"));
    let head = load_head(dir.join("ck")).unwrap();
    let input = FeaturePlane::load(dir.join("feats/pose_002.fpln")).unwrap().cast::<f64>();
    let expected = head.forward_plane(&input).unwrap();
    let got = FeaturePlane::load(dir.join("out.fpln")).unwrap().cast::<f64>();
    assert!(got.max_abs_diff(&expected) < 1e-6);

    ok(dir, &["visualize", "--input", "out.fpln", "--component", "1", "--mode", "register", "--out", "o.ppm"]);
    let ppm = std::fs::read(dir.join("o.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(ppm.len(), b"P6\n32 32\n255\n".len() + 32 * 32 * 3);
}

#[test]
fn mismatched_cache_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    std::fs::write(dir.join("other.toml"), CONFIG.replace("k = 3", "k = 4")).unwrap();
    let out = regmod(
        dir,
        &["synth", "--mesh", "m.obj", "--poses", "p.toml", "--config", "other.toml", "--cache", "c.pcch", "--out", "x"],
    );
    assert!(!out.status.success());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(!regmod(dir, &["visualize", "--input", "missing.fpln", "--out", "o.ppm"]).status.success());
    assert!(!regmod(dir, &["gradcheck", "--scale", "huge"]).status.success());
    std::fs::write(dir.join("bad.toml"), "colour = 3\n").unwrap();
    let out = regmod(dir, &["preprocess", "--mesh", "m.obj", "--poses", "p.toml", "--config", "bad.toml", "--out", "c"]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_passes_at_desk_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(tmp.path(), &["gradcheck"]);
    assert_eq!(stdout.matches("PASS").count(), 2);
}
