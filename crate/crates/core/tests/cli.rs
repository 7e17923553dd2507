use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCENE: &str = r#"
seed = 5

[[primitive]]
shape = "cylinder"
label = 0
points = 120
center = [0.0, 0.0, 1.0]
radius = 0.3
height = 2.0
noise = 0.01

[[primitive]]
shape = "disk"
label = 1
points = 120
center = [3.0, 0.0, 0.5]
radius = 1.0
"#;

fn gibly(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gibly")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn synth(dir: &Path, name: &str) -> String {
    let spec = write(dir, "scene.toml", SCENE);
    let out_path = dir.join(name).to_str().unwrap().to_owned();
    let out = gibly(&["synth", &spec, "--out", &out_path]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    out_path
}

#[test]
fn synth_is_deterministic_across_formats() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.xyz");
    let b = synth(dir.path(), "b.xyz");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ply = synth(dir.path(), "c.ply");
    assert!(fs::read_to_string(ply).unwrap().contains("element vertex 240\n"));
}

#[test]
fn extract_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = synth(dir.path(), "cloud.xyz");
    let mut outputs = Vec::new();
    for (k, workers) in ["1", "1", "8"].iter().enumerate() {
        let feats = dir.path().join(format!("f{k}.csv")).to_str().unwrap().to_owned();
        let pre = dir.path().join(format!("p{k}.csv")).to_str().unwrap().to_owned();
        let out = gibly(&["--workers", workers, "extract", &cloud, "--out-features", &feats, "--out-pre-projection", &pre]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        outputs.push((fs::read(feats).unwrap(), fs::read(pre).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    let header = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert!(header.starts_with("f0,f1,"));
    assert_eq!(header.lines().count(), 241);
}

#[test]
fn train_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "scene.toml", SCENE);
    let mut outputs = Vec::new();
    for (k, workers) in ["1", "1", "8"].iter().enumerate() {
        let report = dir.path().join(format!("r{k}.csv")).to_str().unwrap().to_owned();
        let params = dir.path().join(format!("w{k}.txt")).to_str().unwrap().to_owned();
        let out = gibly(&[
            "--workers", workers, "--epochs", "4", "--max-neighbors", "16", "train", &spec, "--report", &report,
            "--params-out", &params,
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        outputs.push((fs::read(report).unwrap(), fs::read(params).unwrap(), out.stdout));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    let report = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert!(report.starts_with("model,epoch,loss,accuracy,miou,iou_0,iou_1\n"));
    assert_eq!(report.lines().count(), 1 + 2 * 5);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "scene.toml", SCENE);
    let cfg = write(dir.path(), "gibly.toml", "epochs = 2\nseed = 9\n");
    let report = dir.path().join("r.csv").to_str().unwrap().to_owned();
    let out = gibly(&["--config", &cfg, "--epochs", "3", "train", &spec, "--report", &report]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // the flag wins: 3 epochs give 4 rows per model
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 1 + 2 * 4);

    let bad = write(dir.path(), "bad.toml", "epochs = 2\nepoch_count = 3\n");
    let out = gibly(&["--config", &bad, "train", &spec]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epoch_count"), "{}", stderr(&out));
}

#[test]
fn fit_with_zero_steps_echoes_the_start() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = synth(dir.path(), "cloud.xyz");
    let traj = dir.path().join("t.csv").to_str().unwrap().to_owned();
    let out = gibly(&["fit", &cloud, "--kind", "hollow_cylinder", "--r", "0.2", "--t", "0.1", "--steps", "0", "--report", &traj]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    let initial = lines.next().unwrap().trim_start_matches("initial:").trim().to_owned();
    let fitted = lines.next().unwrap().trim_start_matches("fitted:").trim().to_owned();
    assert_eq!(initial, fitted);
    assert_eq!(fs::read_to_string(traj).unwrap().lines().count(), 2);
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = synth(dir.path(), "cloud.xyz");
    assert_eq!(code(&gibly(&["fit", &cloud, "--kind", "pyramid"])), 2);
    assert_eq!(code(&gibly(&["frobnicate"])), 2);
    assert_eq!(code(&gibly(&["--workers", "0", "extract", &cloud])), 2);
    assert_eq!(code(&gibly(&["extract", "/nonexistent/cloud.xyz"])), 2);
    assert_eq!(code(&gibly(&["bench", "--points", "50", "--repeats", "2"])), 2);
}

#[test]
fn malformed_input_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.xyz", "0 0 0\n1 2\n");
    let out = gibly(&["extract", &bad]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
    let empty = write(dir.path(), "empty.xyz", "# nothing\n");
    assert_eq!(code(&gibly(&["extract", &empty])), 3);
    let binary = write(dir.path(), "b.ply", "ply\nformat binary_little_endian 1.0\nend_header\n");
    assert_eq!(code(&gibly(&["extract", &binary])), 3);
}

#[test]
fn gradcheck_passes_and_a_hopeless_tolerance_fails() {
    let out = gibly(&["--num-scales", "1", "--gibs-per-kind", "1", "--num-composites", "4", "--projection-dim", "2", "gradcheck", "--points", "10"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let out = gibly(&[
        "--num-scales", "1", "--gibs-per-kind", "1", "--num-composites", "4", "--projection-dim", "2", "gradcheck",
        "--points", "10", "--tolerance", "1e-30",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn bench_prints_every_phase() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv").to_str().unwrap().to_owned();
    let out = gibly(&["bench", "--points", "2000", "--repeats", "3", "--csv", &csv]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("Neighborhood"));
    let csv = fs::read_to_string(csv).unwrap();
    let total: f64 = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6, "{total}");
}
