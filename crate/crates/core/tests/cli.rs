use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = "\
# small enough to train in well under a second
data.size = 8
backbone.a.widths = 3
backbone.b.stem = 2
backbone.b.growth = 2
backbone.b.blocks = 1
model.hidden = 4
train.epochs = 2
train.batch_size = 8
xai.ig_steps = 4
";

fn dggxnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dggxnet"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dggxnet(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails_with(dir: &Path, args: &[&str], needle: &str) {
    let out = dggxnet(dir, args);
    assert_eq!(out.status.code(), Some(2), "{args:?} should exit 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(needle), "stderr `{stderr}` lacks `{needle}`");
}

/// Generates 12 images per class and trains the tiny model.
fn trained(dir: &Path) {
    ok(dir, &["gen-data", "--out", "data", "--per-class", "12", "--size", "8"]);
    fs::write(dir.join("tiny.conf"), TINY_CONFIG).unwrap();
    ok(dir, &["train", "--data", "data", "--config", "tiny.conf", "--out", "m.dggx"]);
}

#[test]
fn gen_data_writes_images_and_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let stdout = ok(p, &["gen-data", "--out", "a", "--per-class", "4", "--size", "8", "--seed", "3"]);
    assert!(stdout.contains("wrote 12 images"));
    ok(p, &["gen-data", "--out", "b", "--per-class", "4", "--size", "8", "--seed", "3"]);
    let manifest = fs::read_to_string(p.join("a/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 13);
    assert_eq!(manifest, fs::read_to_string(p.join("b/manifest.csv")).unwrap());
    for line in manifest.lines().skip(1) {
        let rel = line.split(',').next().unwrap();
        assert_eq!(fs::read(p.join("a").join(rel)).unwrap(), fs::read(p.join("b").join(rel)).unwrap());
    }
}

#[test]
fn bad_arguments_exit_with_status_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fails_with(p, &["gen-data", "--out", "x", "--per-class", "0"], "per-class must be positive");
    fs::write(p.join("typo.conf"), "train.learnig_rate = 0.1\n").unwrap();
    fails_with(p, &["train", "--data", "x", "--config", "typo.conf", "--out", "m"], "learnig_rate");
    fails_with(p, &["eval", "--checkpoint", "missing.dggx", "--data", "x", "--report", "r"], "missing.dggx");
}

#[test]
fn train_eval_explain_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    for f in ["m.dggx", "m.dggx.log.csv", "m.dggx.summary.json", "m.dggx.split.csv"] {
        assert!(p.join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(p.join("m.dggx.log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,train_acc,val_loss,val_acc"));
    assert_eq!(log.lines().count(), 3);

    ok(p, &["eval", "--checkpoint", "m.dggx", "--data", "data", "--split", "validation", "--report", "rep"]);
    let report = fs::read_to_string(p.join("rep/report.txt")).unwrap();
    assert!(report.contains("Accuracy"), "{report}");
    for class in ["alzheimer", "normal", "tumour"] {
        assert!(p.join(format!("rep/roc_{class}.csv")).is_file());
    }

    let image = "data/normal/normal_00000.pgm";
    ok(p, &["explain", "--checkpoint", "m.dggx", "--image", image, "--out", "one"]);
    assert!(p.join("one/gradcam_b.ppm").is_file() && !p.join("one/gradcam_a.ppm").exists());
    ok(
        p,
        &[
            "explain",
            "--checkpoint",
            "m.dggx",
            "--image",
            image,
            "--class",
            "1",
            "--branch",
            "both",
            "--out",
            "xai",
        ],
    );
    let mut ppm: Vec<String> = fs::read_dir(p.join("xai"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    ppm.sort();
    assert_eq!(ppm, ["gradcam_a.ppm", "gradcam_b.ppm", "ig.ppm"]);
    assert!(fs::read(p.join("xai/ig.ppm")).unwrap().starts_with(b"P6"));

    fails_with(
        p,
        &["explain", "--checkpoint", "m.dggx", "--image", image, "--class", "5", "--out", "xai"],
        "class",
    );
}

#[test]
fn config_prints_parseable_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["config"]);
    assert!(text.contains("train.learning_rate"));
    let parsed = dggxnet::config::RunConfig::parse(&text).unwrap();
    assert_eq!(parsed, dggxnet::config::RunConfig::default());
}
