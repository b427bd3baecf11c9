use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--primitives",
    "24",
    "--mouth_primitives",
    "6",
    "--frames",
    "6",
    "--heldout",
    "2",
    "--width",
    "16",
    "--height",
    "16",
];
const QUICK: &[&str] = &[
    "--branch_iterations",
    "2",
    "--joint_iterations",
    "1",
    "--members",
    "3",
    "--hidden",
    "8",
];

fn uasplat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uasplat"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = uasplat(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1, "one summary line: {stdout}");
    stdout
}

fn synth(dir: &Path) {
    let mut args = vec!["synth-scene"];
    args.extend(SMALL);
    ok(dir, &args);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((
                p.strip_prefix(dir).unwrap_or(&p).display().to_string(),
                fs::read(&p).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

#[test]
fn synth_scene_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path());
    synth(b.path());
    let fa = files(&a.path().join("dataset"));
    assert!(fa.iter().any(|(n, _)| n.ends_with("full_0005.ppm")));
    assert_eq!(fa, files(&b.path().join("dataset")));
}

#[test]
fn drive_starts_at_one_half() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    let csv = fs::read_to_string(d.path().join("dataset/drive.csv")).unwrap();
    let first: f64 = csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(first, 0.5 + 0.5 * 0f64.sin());
}

#[test]
fn validation_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    for args in [
        vec!["synth-scene", "--frames", "0"],
        vec!["synth-scene", "--no_such_key", "1"],
        vec!["synth-scene", "--primitives", "many"],
        vec!["train", "--data", "missing"],
        vec!["eval"],
        vec!["bogus"],
    ] {
        let out = uasplat(d.path(), &args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn divergence_exits_with_two() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    let mut args = vec!["train", "--lr_scene", "1e300"];
    args.extend(QUICK);
    let out = uasplat(d.path(), &args);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteration"));
}

#[test]
fn untrained_checkpoint_evaluates_and_renders() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    ok(
        d.path(),
        &[
            "train",
            "--branch_iterations",
            "0",
            "--joint_iterations",
            "0",
            "--members",
            "3",
        ],
    );
    let summary = ok(d.path(), &["eval", "--split", "all"]);
    assert!(summary.starts_with("eval: 6 all frames"));
    let report = fs::read_to_string(d.path().join("run/eval.txt")).unwrap();
    let mean: Vec<f64> = report
        .lines()
        .find(|l| l.starts_with("mean "))
        .unwrap()
        .split_whitespace()
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(mean.len(), 3);
    assert!(mean.iter().all(|v| v.is_finite()));

    ok(d.path(), &["render", "--out", "renders"]);
    let ppms = fs::read_dir(d.path().join("renders"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "ppm")
        })
        .count();
    assert_eq!(ppms, 6);
}

#[test]
fn ablation_table_has_both_modes() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    let mut args = vec!["ablate-fusion", "--tone_noise", "1"];
    args.extend(QUICK);
    ok(d.path(), &args);
    let text = fs::read_to_string(d.path().join("ablation/ablation.txt")).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().collect())
        .collect();
    assert_eq!(rows[0], vec!["mode", "psnr", "ssim"]);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], "uncertainty");
    assert_eq!(rows[2][0], "uniform");
    for r in &rows[1..] {
        assert!(
            r[1].parse::<f64>().unwrap().is_finite() && r[2].parse::<f64>().unwrap().is_finite()
        );
    }
    assert!(
        uasplat(d.path(), &["ablate-fusion", "--fusion", "uniform"])
            .status
            .code()
            == Some(1)
    );
}

#[test]
fn resolved_config_reproduces_the_run() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    let mut args = vec!["train", "--seed", "3", "--lambda=0.25"];
    args.extend(QUICK);
    ok(d.path(), &args);
    let echoed = fs::read_to_string(d.path().join("run/train.config")).unwrap();
    assert!(
        echoed.contains("seed = 3\n")
            && echoed.contains("lambda = 0.25\n")
            && echoed.contains("fusion = uncertainty\n")
    );
    ok(
        d.path(),
        &["train", "--config", "run/train.config", "--out", "again"],
    );
    for f in ["model.bin", "trace.csv"] {
        assert_eq!(
            fs::read(d.path().join("run").join(f)).unwrap(),
            fs::read(d.path().join("again").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn config_file_then_overrides() {
    let d = tempfile::tempdir().unwrap();
    let mut text = String::from("# small scene\n");
    for pair in SMALL.chunks(2) {
        text.push_str(&format!("{} = {}\n", &pair[0][2..], pair[1]));
    }
    text.push_str("frames = 9   # overridden below\n\n");
    fs::write(d.path().join("s.cfg"), text).unwrap();
    ok(
        d.path(),
        &["synth-scene", "--config", "s.cfg", "--frames", "7"],
    );
    let echoed = fs::read_to_string(d.path().join("dataset/synth-scene.config")).unwrap();
    assert!(echoed.contains("frames = 7\n") && echoed.contains("primitives = 24\n"));
    assert!(d.path().join("dataset/frames/full_0006.ppm").is_file());
    assert!(!d.path().join("dataset/frames/full_0007.ppm").exists());

    fs::write(d.path().join("bad.cfg"), "frames: 3\n").unwrap();
    assert_eq!(
        uasplat(d.path(), &["synth-scene", "--config", "bad.cfg"])
            .status
            .code(),
        Some(1)
    );
}
