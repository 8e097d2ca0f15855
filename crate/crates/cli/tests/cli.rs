use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn mvadapt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvadapt"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, json: &str) {
    std::fs::write(dir.join("run.json"), json).unwrap();
}

/// A run small enough for a test: four subjects, their stored maps as view
/// predictions, a briefly trained source model and one adaptation epoch.
const SMALL: &str = r#"{
    "subjects": 4,
    "source": {"subjects": 2, "epochs": 2},
    "pipeline": {"view_predictions": "given"},
    "adaptation": {"train": {"epochs": 1}}
}"#;

fn digest(dir: &Path, files: &[&str]) -> String {
    let mut h = Sha256::new();
    for f in files {
        h.update(std::fs::read(dir.join(f)).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn unknown_config_key_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), r#"{"subjects": 2, "bogus": 1}"#);
    let out = mvadapt(dir.path(), &["--config", "run.json", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn bad_worker_count_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mvadapt"))
        .current_dir(dir.path())
        .env("GRIN_WORKERS", "zero")
        .args(["--subjects", "1", "synth"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_writes_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvadapt(dir.path(), &["--subjects", "2", "--out", "o", "synth"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for id in ["s000000", "s000001"] {
        let root = dir.path().join("o/subjects").join(id);
        assert!(root.join("subject.json").is_file());
        assert!(root.join("view0.probs.grit").is_file());
    }
    assert!(dir.path().join("o/config.json").is_file());
}

#[test]
fn registration_failure_exits_with_3() {
    // a barely trained source model yields maps too poor to register
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        r#"{"subjects": 4, "source": {"subjects": 2, "epochs": 2}}"#,
    );
    let out = mvadapt(dir.path(), &["--config", "run.json", "pipeline"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("out/exclusions.json").is_file());
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let files = [
        "train_log.csv",
        "scores.csv",
        "report.json",
        "split.json",
        "models/source/weights.grit",
        "models/adapted/weights.grit",
        "models/adapted/bias.grit",
    ];
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let out = mvadapt(
            dir.path(),
            &["--config", "run.json", "--out", run, "pipeline"],
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("adapted"), "{stdout}");
        digests.push(digest(&dir.path().join(run), &files));
    }
    assert_eq!(digests[0], digests[1]);

    let out = mvadapt(
        dir.path(),
        &["--config", "run.json", "--out", "a", "evaluate"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("a/eval/report.json").is_file());
}
