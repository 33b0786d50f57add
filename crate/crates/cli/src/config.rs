//! TOML run configuration.
//!
//! Relative paths resolve against the directory holding the config file.
//! Endpoint tokens come from the environment, never from the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use conflictkit::backends::http::{HttpBackend, WireProfile};
use conflictkit::backends::{
    Backend, BackendRole, Backends, MockInfiller, MockInpainter, MockSegmenter, MockVlm,
    RetryPolicy, ScriptedBackend, SlotConfig,
};
use conflictkit::metrics::subject::PromptTemplate;
use conflictkit::metrics::vocab::CategoryVocabulary;
use conflictkit::perturb::PipelineConfig;
use conflictkit::Parallelism;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub store: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub parallel: bool,
    #[serde(default)]
    pub prompts: PromptPaths,
    #[serde(default)]
    pub vocab: VocabOverride,
    #[serde(default)]
    pub backends: BTreeMap<BackendRole, BackendSpec>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPaths {
    pub extractor: Option<PathBuf>,
    pub infill: Option<PathBuf>,
    /// TOML file with `user` and optional `system` keys.
    pub subject: Option<PathBuf>,
}

/// Replaces whole token sets of the default vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabOverride {
    pub yesno: Option<BTreeSet<String>>,
    pub color: Option<BTreeSet<String>>,
    pub shape: Option<BTreeSet<String>>,
    pub number_words: Option<BTreeSet<String>>,
    pub number_digit_max: Option<u32>,
}

impl VocabOverride {
    pub fn apply(&self) -> CategoryVocabulary {
        let mut v = CategoryVocabulary::default();
        let lower = |s: &BTreeSet<String>| s.iter().map(|t| t.to_lowercase()).collect();
        if let Some(s) = &self.yesno {
            v.yesno = lower(s);
        }
        if let Some(s) = &self.color {
            v.color = lower(s);
        }
        if let Some(s) = &self.shape {
            v.shape = lower(s);
        }
        if let Some(s) = &self.number_words {
            v.number_words = lower(s);
        }
        if let Some(m) = self.number_digit_max {
            v.number_digit_max = m;
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Http,
    Chat,
    Scripted,
    MockSegmenter,
    MockInpainter,
    MockInfiller,
    MockVlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub url: Option<String>,
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    pub token_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Total attempts per call.
    #[serde(default = "default_retry")]
    pub retry_limit: u32,
    #[serde(default = "default_delay")]
    pub base_delay_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub send_store_ids: bool,
    /// Mock seed; defaults to the run seed.
    pub seed: Option<u64>,
    /// JSON script for `scripted` backends.
    pub script: Option<PathBuf>,
}

fn default_in_flight() -> usize {
    4
}
fn default_retry() -> u32 {
    3
}
fn default_delay() -> u64 {
    200
}
fn default_timeout() -> u64 {
    120_000
}

impl BackendSpec {
    pub fn mock(kind: BackendKind) -> Self {
        BackendSpec {
            kind,
            url: None,
            model: None,
            token_env: None,
            max_in_flight: default_in_flight(),
            retry_limit: default_retry(),
            base_delay_ms: 0,
            timeout_ms: default_timeout(),
            send_store_ids: false,
            seed: None,
            script: None,
        }
    }
}

/// Token lookup: `CONFLICTKIT_{ROLE}_TOKEN` wins over `token_env`.
fn token_for(role: BackendRole, spec: &BackendSpec) -> Option<String> {
    let fixed = format!("CONFLICTKIT_{}_TOKEN", role.as_str().to_ascii_uppercase());
    std::env::var(&fixed)
        .ok()
        .or_else(|| spec.token_env.as_ref().and_then(|v| std::env::var(v).ok()))
        .filter(|t| !t.is_empty())
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub base: PathBuf,
    pub config: RunConfig,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| PathBuf::from("."));
        let loaded = LoadedConfig {
            path: path.to_path_buf(),
            base,
            config,
        };
        loaded.check_paths()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn store_root(&self) -> PathBuf {
        self.resolve(&self.config.store)
    }

    fn check_paths(&self) -> Result<(), CliError> {
        let p = &self.config.prompts;
        for path in [&p.extractor, &p.infill, &p.subject].into_iter().flatten() {
            let full = self.resolve(path);
            if !full.is_file() {
                return Err(CliError::config(format!("prompt file {} not found", full.display())));
            }
        }
        for (role, spec) in &self.config.backends {
            match spec.kind {
                BackendKind::Http | BackendKind::Chat if spec.url.is_none() => {
                    return Err(CliError::config(format!("backend {} needs a url", role.as_str())));
                }
                BackendKind::Scripted => {
                    let Some(script) = &spec.script else {
                        return Err(CliError::config(format!("backend {} needs a script", role.as_str())));
                    };
                    if !self.resolve(script).is_file() {
                        return Err(CliError::config(format!("script {} not found", script.display())));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn parallelism(&self) -> Parallelism {
        if self.config.parallel {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }

    pub fn vocab(&self) -> CategoryVocabulary {
        self.config.vocab.apply()
    }

    fn read_prompt(&self, path: &Option<PathBuf>) -> Result<Option<String>, CliError> {
        path.as_ref()
            .map(|p| {
                let full = self.resolve(p);
                fs::read_to_string(&full)
                    .map(|s| s.trim_end_matches('\n').to_string())
                    .map_err(|e| CliError::config(format!("cannot read {}: {e}", full.display())))
            })
            .transpose()
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let mut pc = PipelineConfig {
            vocab: self.vocab(),
            ..Default::default()
        };
        if let Some(t) = self.read_prompt(&self.config.prompts.extractor)? {
            pc.extractor_template = t;
        }
        if let Some(t) = self.read_prompt(&self.config.prompts.infill)? {
            pc.infill_template = t;
        }
        Ok(pc)
    }

    pub fn subject_template(&self) -> Result<PromptTemplate, CliError> {
        match &self.config.prompts.subject {
            None => Ok(PromptTemplate::default()),
            Some(p) => read_template(&self.resolve(p)),
        }
    }

    pub fn backends(&self) -> Result<Backends, CliError> {
        let mut out = Backends::new();
        for (&role, spec) in &self.config.backends {
            let backend = self.build(role, spec)?;
            out.insert(
                role,
                backend,
                SlotConfig {
                    max_in_flight: spec.max_in_flight,
                    retry: RetryPolicy {
                        max_attempts: spec.retry_limit.max(1),
                        base_delay_ms: spec.base_delay_ms,
                        max_delay_ms: spec.base_delay_ms.saturating_mul(64),
                    },
                },
            );
        }
        Ok(out)
    }

    fn build(&self, role: BackendRole, spec: &BackendSpec) -> Result<Arc<dyn Backend>, CliError> {
        let seed = spec.seed.unwrap_or(self.config.seed);
        let name = |default: &str| spec.model.clone().unwrap_or_else(|| default.to_string());
        Ok(match spec.kind {
            BackendKind::Http | BackendKind::Chat => {
                let profile = if spec.kind == BackendKind::Chat {
                    WireProfile::Chat
                } else {
                    WireProfile::Native
                };
                let url = spec.url.clone().unwrap_or_default();
                let b = HttpBackend::new(name(&url), url.clone(), profile, Duration::from_millis(spec.timeout_ms))
                    .map_err(CliError::config)?
                    .token(token_for(role, spec))
                    .model(spec.model.clone())
                    .send_store_ids(spec.send_store_ids);
                Arc::new(b)
            }
            BackendKind::Scripted => {
                let path = self.resolve(spec.script.as_ref().expect("checked at load"));
                let text = fs::read_to_string(&path)
                    .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
                let script: ScriptedBackend = serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                Arc::new(script)
            }
            BackendKind::MockSegmenter => Arc::new(MockSegmenter::default()),
            BackendKind::MockInpainter => Arc::new(MockInpainter::default()),
            BackendKind::MockInfiller => Arc::new(MockInfiller::new(&name("mock-infiller"))),
            BackendKind::MockVlm => Arc::new(MockVlm::new(&name("mock-vlm"), seed)),
        })
    }
}

pub fn read_template(path: &Path) -> Result<PromptTemplate, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Config text with every role served by a mock; used by `synth`.
pub fn mock_config_toml(store: &str, seed: u64) -> String {
    let mut out = format!("store = \"{store}\"\nseed = {seed}\n");
    let roles = [
        ("object_extractor", "mock-vlm"),
        ("segmenter", "mock-segmenter"),
        ("inpainter", "mock-inpainter"),
        ("infiller", "mock-infiller"),
        ("judge", "mock-vlm"),
        ("subject", "mock-vlm"),
    ];
    for (role, kind) in roles {
        out.push_str(&format!("\n[backends.{role}]\nkind = \"{kind}\"\nbase_delay_ms = 0\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_config_parses() {
        let cfg: RunConfig = toml::from_str(&mock_config_toml("store", 3)).unwrap();
        assert_eq!(cfg.backends.len(), 6);
        assert_eq!(cfg.seed, 3);
        assert!(cfg.parallel);
        assert_eq!(cfg.backends[&BackendRole::Judge].kind, BackendKind::MockVlm);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("store = \"s\"\nsede = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("store = \"s\"\n[backends.painter]\nkind = \"http\"\n").is_err());
    }

    #[test]
    fn vocab_override_replaces_sets() {
        let v = VocabOverride {
            color: Some(["Teal".to_string()].into_iter().collect()),
            ..Default::default()
        }
        .apply();
        assert_eq!(v.color.len(), 1);
        assert!(v.color.contains("teal"));
        assert_eq!(v.shape, CategoryVocabulary::default().shape);
    }

    #[test]
    fn http_without_url_fails_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "store = \"s\"\n[backends.judge]\nkind = \"http\"\n").unwrap();
        let err = LoadedConfig::load(&p).unwrap_err();
        assert!(err.detail.contains("url"));
        assert!(!dir.path().join("s").exists());
    }
}
