//! End-to-end runs of the t3kit binary.

use std::path::Path;
use std::process::Command;

fn t3kit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_t3kit"))
}

fn write_recognition_config(dir: &Path) -> std::path::PathBuf {
    let root = dir.join("data");
    let cfg = format!(
        r#"
[task]
kind = "recognition"
head_mode = "adg"

[model]
encoder_channels = [8, 16]
attn_heads = 4
queue_capacity = 32

[data]
root = "{}"

[data.stitch]
num_selected = 4
crop_size = 16
resize_factor = 1.0
test_replicas = 2
policy = "identity"

[optim]
lr = 0.002
steps = 6
batch_size = 4
seed = 3
checkpoint_every = 0

[synth.recognition]
num_verbs = 2
num_nouns = 2
videos_per_class = 2
frames_per_video = 5
frame_size = 32
seed = 3
"#,
        root.display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn full_recognition_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_recognition_config(dir.path());
    let out = dir.path().join("out");

    let gen = t3kit()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(dir.path().join("data/labels.csv").exists());

    let train = t3kit()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let ckpt = out.join("checkpoint.json");
    assert!(ckpt.exists());
    assert!(out.join("train_log.csv").exists());

    let eval = t3kit()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(out.join("metrics.json").exists());
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("acc_action"), "{stdout}");

    let predict = t3kit()
        .args(["predict", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(predict.status.success());
    let csv = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert!(csv.starts_with("video_id,verb_id,noun_id,action_id"));
    assert_eq!(csv.lines().count(), 1 + 8, "header plus one row per clip");

    let report = t3kit().args(["report", "--out"]).arg(&out).output().unwrap();
    assert!(report.status.success());
    assert!(out.join("loss_curve.png").exists());
    assert!(out.join("metrics_bars.png").exists());
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        r#"
[task]
kind = "recognition"

[data]
root = "/nonexistent"

[data.stitch]
num_selected = 7
"#,
    )
    .unwrap();
    let out = t3kit()
        .args(["train", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_data_root_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_recognition_config(dir.path());
    // no generate step: data root absent
    let out = t3kit()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_override_applies_to_generation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_recognition_config(dir.path());
    let run = |seed: &str, out: &Path| {
        let s = t3kit()
            .args(["generate", "--config"])
            .arg(&cfg)
            .args(["--seed", seed])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(s.success());
        std::fs::read(dir.path().join("data/frames/clip0000/00000.png")).unwrap()
    };
    let a = run("11", &dir.path().join("o1"));
    let b = run("11", &dir.path().join("o2"));
    let c = run("12", &dir.path().join("o3"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}
