//! End-to-end runs of the command-line tool on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
actor_examples = 16
reasoner_examples = 8
k_grid = [4]
[tasks]
train = 40
validation = 4
seen_eval = 6
unseen_eval = 6
[pretrain]
steps = 10
[actor]
steps = 4
eval_every = 2
[reasoner]
steps = 2
[eval]
tasks_per_split = 2
seeds = [0, 1]
payloads = ["matched", "none", "RandomRot", "reasoner-K4"]
[analysis]
examples = 3
k = 4
latency_reps = 2
"#;

fn interlat(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_interlat"))
        .arg("--output-root")
        .arg(root)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = interlat(dir.path(), &["--set", "actor.stepz=3", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn invalid_value_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = interlat(dir.path(), &["--set", "compression.temperature=0", "gen-data"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_payload_lists_valid_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = interlat(dir.path(), &["--config", &cfg, "eval", "--payload", "telepathy"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("telepathy") && err.contains("RandomRot"), "{err}");
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    for run in ["a", "b"] {
        let out = interlat(dir.path(), &["--config", &cfg, "--run", run, "gen-data"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for split in ["train", "validation", "seen", "unseen"] {
        let name = format!("tasks-{split}.jsonl");
        let a = fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = fs::read(dir.path().join("b").join(&name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs between runs");
    }
}

#[test]
fn full_pipeline_runs_and_reuses_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let stages: [&[&str]; 7] = [
        &["gen-data"],
        &["train-actor"],
        &["train-reasoner"],
        &["eval"],
        &["compress-sweep"],
        &["analyze-parallelism"],
        &["bench-latency"],
    ];
    for stage in stages {
        let mut args = vec!["--config", cfg.as_str(), "--reuse"];
        args.extend_from_slice(stage);
        let out = interlat(dir.path(), &args);
        assert!(out.status.success(), "{stage:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let run = dir.path().join("default");
    for file in ["base.ckpt", "actor.ckpt", "reasoner-K4.ckpt", "sweep.csv", "parallelism.csv", "latency.csv"] {
        assert!(run.join(file).exists(), "missing {file}");
    }
    let eval: Vec<_> = fs::read_dir(&run)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("eval-") && n.ends_with("-summary.csv"))
        .collect();
    assert_eq!(eval.len(), 1);
    let summary = fs::read_to_string(run.join(&eval[0])).unwrap();
    for payload in ["matched", "none", "RandomRot", "reasoner-K4"] {
        assert!(summary.contains(payload), "summary lacks {payload}");
    }

    // A reused stage leaves its checkpoint untouched.
    let before = fs::metadata(run.join("actor.ckpt")).unwrap().modified().unwrap();
    let out = interlat(dir.path(), &["--config", &cfg, "--reuse", "train-actor"]);
    assert!(out.status.success());
    assert_eq!(fs::metadata(run.join("actor.ckpt")).unwrap().modified().unwrap(), before);
}
