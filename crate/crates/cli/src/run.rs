//! Run manifests: one JSON file per command invocation, written next to its
//! primary output as `{stem}.run.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use conflictkit::content_hash;
use conflictkit::manifest::{file_hash, read_json, write_json};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub args: BTreeMap<String, Value>,
    pub config: Option<Value>,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_at: DateTime<Utc>,
    pub wall_clock_ms: u64,
    pub counts: Value,
}

/// `out` with its extension replaced: `a/records.jsonl` -> `a/records.{suffix}`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

pub fn run_manifest_path(out: &Path) -> PathBuf {
    sibling(out, "run.json")
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

pub struct Run {
    command: String,
    started: Instant,
    started_at: DateTime<Utc>,
    args: BTreeMap<String, Value>,
    config: Option<Value>,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    input_paths: Vec<PathBuf>,
}

impl Run {
    pub fn new(command: &str) -> Self {
        Run {
            command: command.to_string(),
            started: Instant::now(),
            started_at: Utc::now(),
            args: BTreeMap::new(),
            config: None,
            seed: None,
            inputs: BTreeMap::new(),
            input_paths: Vec::new(),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.args
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable arg"));
        self
    }

    pub fn config(&mut self, config: impl Serialize) -> &mut Self {
        self.config = Some(serde_json::to_value(config).expect("serializable config"));
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    /// Record an input file and its hash. Missing inputs are precondition errors.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let hash = file_hash(path)
            .map_err(|e| CliError::precondition(format!("cannot read input {}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), hash);
        self.input_paths.push(path.to_path_buf());
        Ok(())
    }

    /// Refuse outputs that would overwrite an input.
    pub fn guard_outputs(&self, outputs: &[&Path]) -> Result<(), CliError> {
        for out in outputs {
            if self.input_paths.iter().any(|i| same_file(i, out)) {
                return Err(CliError::precondition(format!(
                    "output {} would overwrite an input",
                    out.display()
                )));
            }
        }
        Ok(())
    }

    pub fn run_id(&self) -> String {
        let key = serde_json::json!({
            "command": self.command,
            "args": self.args,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs.values().collect::<Vec<_>>(),
        });
        content_hash(key.to_string().as_bytes())[..16].to_string()
    }

    /// True when a previous run with the same id left outputs whose hashes
    /// still match.
    pub fn up_to_date(&self, primary_out: &Path) -> bool {
        let Ok(prev) = read_json::<RunManifest>(&run_manifest_path(primary_out)) else {
            return false;
        };
        prev.run_id == self.run_id() && verify(&prev).is_empty()
    }

    pub fn finish(self, outputs: &[&Path], counts: Value) -> Result<RunManifest, CliError> {
        let mut hashes = BTreeMap::new();
        for out in outputs {
            let h = file_hash(out)
                .map_err(|e| CliError::runtime(format!("cannot hash output {}: {e}", out.display())))?;
            hashes.insert(out.display().to_string(), h);
        }
        let manifest = RunManifest {
            run_id: self.run_id(),
            command: self.command,
            args: self.args,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: hashes,
            started_at: self.started_at,
            wall_clock_ms: self.started.elapsed().as_millis() as u64,
            counts,
        };
        let primary = outputs.first().expect("at least one output");
        write_json(&run_manifest_path(primary), &manifest)
            .map_err(|e| CliError::runtime(format!("cannot write run manifest: {e}")))?;
        Ok(manifest)
    }
}

/// Outputs whose current hash differs from the recorded one.
pub fn verify(manifest: &RunManifest) -> Vec<String> {
    manifest
        .outputs
        .iter()
        .filter(|(path, hash)| file_hash(Path::new(path)).ok().as_ref() != Some(*hash))
        .map(|(path, _)| path.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_names() {
        assert_eq!(sibling(Path::new("a/records.jsonl"), "run.json"), PathBuf::from("a/records.run.json"));
        assert_eq!(run_manifest_path(Path::new("report.json")), PathBuf::from("report.run.json"));
    }

    #[test]
    fn finish_then_verify_then_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.jsonl");
        let out = dir.path().join("out.jsonl");
        std::fs::write(&input, "a\n").unwrap();
        std::fs::write(&out, "b\n").unwrap();
        let mut run = Run::new("x");
        run.input(&input).unwrap();
        assert!(run.guard_outputs(&[&input]).is_err());
        let id = run.run_id();
        let m = run.finish(&[&out], serde_json::json!({})).unwrap();
        assert_eq!(m.run_id, id);
        assert!(verify(&m).is_empty());

        let mut again = Run::new("x");
        again.input(&input).unwrap();
        assert!(again.up_to_date(&out));
        std::fs::write(&out, "c\n").unwrap();
        assert!(!again.up_to_date(&out));
        assert_eq!(verify(&m).len(), 1);
    }

    #[test]
    fn run_id_tracks_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        std::fs::write(&input, "a").unwrap();
        let mut a = Run::new("x");
        a.input(&input).unwrap();
        std::fs::write(&input, "b").unwrap();
        let mut b = Run::new("x");
        b.input(&input).unwrap();
        assert_ne!(a.run_id(), b.run_id());
    }
}
