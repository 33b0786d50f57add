use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conflictkit"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "ex", "--n", "16", "--seed", "3"]);
    ok(dir.path(), &[
        "--config", "ex/config.toml", "ingest", "--input", "ex/records.jsonl", "--out", "run/samples.jsonl",
    ]);
    dir
}

#[test]
fn perturb_without_segmenter_fails_cleanly() {
    let dir = setup();
    let config = std::fs::read_to_string(dir.path().join("ex/config.toml")).unwrap();
    let trimmed = config.replace("[backends.segmenter]\nkind = \"mock-segmenter\"\nbase_delay_ms = 0\n", "");
    assert_ne!(config, trimmed);
    std::fs::write(dir.path().join("ex/partial.toml"), trimmed).unwrap();
    let out = run(dir.path(), &[
        "--config", "ex/partial.toml", "perturb", "--samples", "run/samples.jsonl", "--out", "run/records.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "precondition");
    assert!(err["detail"].as_str().unwrap().contains("segmenter"));
    assert!(!dir.path().join("run/records.jsonl").exists());
    assert!(!dir.path().join("run/records.run.json").exists());
}

#[test]
fn usage_errors_are_json_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
    let out = run(dir.path(), &["metrics", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_may_not_overwrite_input() {
    let dir = setup();
    let out = run(dir.path(), &[
        "--config", "ex/config.toml", "perturb", "--samples", "run/samples.jsonl", "--out", "run/samples.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "precondition");
}

#[test]
fn resume_skips_and_verify_detects_edits() {
    let dir = setup();
    let args = [
        "--config", "ex/config.toml", "perturb", "--samples", "run/samples.jsonl", "--out", "run/records.jsonl",
    ];
    let first = ok(dir.path(), &args);
    let resumed = ok(dir.path(), &[&["--resume"][..], &args[..]].concat());
    assert_eq!(resumed["resumed"], true);
    assert_eq!(resumed["run_id"], first["run_id"]);

    ok(dir.path(), &["verify", "--run", "run/records.run.json"]);
    let path = dir.path().join("run/records.jsonl");
    let mut body = std::fs::read_to_string(&path).unwrap();
    body.push('\n');
    std::fs::write(&path, body).unwrap();
    let out = run(dir.path(), &["verify", "--run", "run/records.run.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["detail"].as_str().unwrap().contains("records.jsonl"));

    // an edited output is no longer up to date, so resume recomputes it
    let again = ok(dir.path(), &[&["--resume"][..], &args[..]].concat());
    assert!(again.get("resumed").is_none());
    ok(dir.path(), &["verify", "--run", "run/records.run.json"]);
}
