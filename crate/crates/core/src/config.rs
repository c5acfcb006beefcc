//! The run configuration document (TOML).
//!
//! ```toml
//! benchmark = "questions.jsonl"   # relative to the config file
//! iterations = 1
//!
//! [generation]                    # GenerationParams, all optional
//! temperature = 0.7
//!
//! [oracle_generation]             # optional; default is [generation] at temperature 0
//!
//! [retry]
//! max_attempts = 5
//!
//! [prompts]                       # optional overrides of the four instructions
//!
//! [[models]]
//! name = "Vicuna-7B"
//! role = "candidate"              # candidate | control | oracle
//! vram_16bit_gb = 13.78
//! vram_4bit_gb = 4.13
//! external_scores = { average = 52.2 }
//!
//! [endpoints."Vicuna-7B"]
//! kind = "http"                   # http | synthetic
//! base_url = "http://127.0.0.1:5000"
//! path = "/v1/chat/completions"
//! api_key_env = "VICUNA_API_KEY"
//! remote_model = "vicuna-7b"
//! extensions = true
//!
//! [prices."gpt-4"]
//! prompt_per_1k = 0.03
//! completion_per_1k = 0.06
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    Backend, FixtureStore, Gateway, HttpBackend, RecordingBackend, ReplayBackend, RetryPolicy, SyntheticBackend,
    Transport,
};
use crate::params::GenerationParams;
use crate::profile::{validate_profile, ModelProfile, Role};
use crate::prompts::PromptSet;
use crate::store::PriceTable;

pub const DEFAULT_PATH: &str = "/v1/chat/completions";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path:?}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
    #[error("environment variable {var} (API key for {model}) is not set")]
    MissingEnv { var: String, model: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Http,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub kind: EndpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default = "default_path")]
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    /// Model name sent on the wire; defaults to the profile name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote_model: Option<String>,
    /// Send top_k, typical_p, repetition_penalty and friends.
    #[serde(default = "yes")]
    pub extensions: bool,
}

fn default_path() -> String {
    DEFAULT_PATH.to_string()
}

fn yes() -> bool {
    true
}

fn one() -> u32 {
    1
}

impl Endpoint {
    pub fn synthetic() -> Self {
        Endpoint {
            kind: EndpointKind::Synthetic,
            base_url: None,
            path: default_path(),
            api_key_env: None,
            remote_model: None,
            extensions: true,
        }
    }

    pub fn url(&self) -> Option<String> {
        let base = self.base_url.as_deref()?.trim_end_matches('/');
        Some(format!("{base}/{}", self.path.trim_start_matches('/')))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Live,
    Record,
    Replay,
}

impl FromStr for BackendMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live" => Ok(BackendMode::Live),
            "record" => Ok(BackendMode::Record),
            "replay" => Ok(BackendMode::Replay),
            other => Err(format!("unknown backend mode {other:?} (live, record, replay)")),
        }
    }
}

impl fmt::Display for BackendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendMode::Live => "live",
            BackendMode::Record => "record",
            BackendMode::Replay => "replay",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<PathBuf>,
    #[serde(default = "one")]
    pub iterations: u32,
    #[serde(default)]
    pub prompts: PromptSet,
    #[serde(default)]
    pub generation: GenerationParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_generation: Option<GenerationParams>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub models: Vec<ModelProfile>,
    #[serde(default)]
    pub endpoints: BTreeMap<String, Endpoint>,
    #[serde(default)]
    pub prices: PriceTable,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            benchmark: None,
            iterations: 1,
            prompts: PromptSet::default(),
            generation: GenerationParams::default(),
            oracle_generation: None,
            retry: RetryPolicy::default(),
            models: Vec::new(),
            endpoints: BTreeMap::new(),
            prices: PriceTable::new(),
            base_dir: PathBuf::new(),
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.iterations == 0 {
            return invalid("iterations must be at least 1".into());
        }
        self.prompts.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.generation.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.oracle_params().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut names = HashSet::new();
        for m in &self.models {
            if !names.insert(m.name.as_str()) {
                return invalid(format!("model {:?} listed twice", m.name));
            }
            validate_profile(m.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        for (name, ep) in &self.endpoints {
            if !names.contains(name.as_str()) {
                return invalid(format!("endpoint for unknown model {name:?}"));
            }
            if ep.kind == EndpointKind::Http && ep.base_url.is_none() {
                return invalid(format!("http endpoint for {name:?} needs base_url"));
            }
        }
        if !self.models.is_empty() {
            for role in [Role::Control, Role::Oracle] {
                let n = self.models.iter().filter(|m| m.role == role).count();
                if n != 1 {
                    return invalid(format!("expected exactly one {role:?} model, found {n}"));
                }
            }
            if self.candidates().is_empty() {
                return invalid("no candidate models".into());
            }
        }
        Ok(())
    }

    pub fn candidates(&self) -> Vec<&ModelProfile> {
        self.models.iter().filter(|m| m.role == Role::Candidate).collect()
    }

    fn single(&self, role: Role) -> Result<&ModelProfile, ConfigError> {
        self.models
            .iter()
            .find(|m| m.role == role)
            .ok_or_else(|| ConfigError::Invalid(format!("no {role:?} model configured")))
    }

    pub fn control(&self) -> Result<&ModelProfile, ConfigError> {
        self.single(Role::Control)
    }

    pub fn oracle(&self) -> Result<&ModelProfile, ConfigError> {
        self.single(Role::Oracle)
    }

    pub fn oracle_params(&self) -> GenerationParams {
        self.oracle_generation.clone().unwrap_or_else(|| GenerationParams {
            temperature: 0.0,
            ..self.generation.clone()
        })
    }

    /// Benchmark path, resolved against the config file's directory.
    pub fn benchmark_path(&self) -> Option<PathBuf> {
        self.benchmark.as_ref().map(|p| self.base_dir.join(p))
    }

    /// JSON snapshot stored in run manifests.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Inverse of [`Config::snapshot`], for runs opened without a config file.
    pub fn from_snapshot(value: serde_json::Value) -> Result<Self, ConfigError> {
        let cfg: Config = serde_json::from_value(value).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn live_backend(
        &self,
        profile: &ModelProfile,
        transport: &Arc<dyn Transport>,
    ) -> Result<Arc<dyn Backend>, ConfigError> {
        let ep = self.endpoints.get(&profile.name).ok_or_else(|| {
            ConfigError::Invalid(format!("no endpoint configured for {:?}", profile.name))
        })?;
        Ok(match ep.kind {
            EndpointKind::Synthetic if profile.role == Role::Oracle => {
                Arc::new(SyntheticBackend::judge(format!("synthetic:{}", profile.name)))
            }
            EndpointKind::Synthetic => Arc::new(SyntheticBackend::generator(format!("synthetic:{}", profile.name))),
            EndpointKind::Http => {
                let api_key = match &ep.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| ConfigError::MissingEnv {
                        var: var.clone(),
                        model: profile.name.clone(),
                    })?),
                    None => None,
                };
                let url = ep.url().expect("validated");
                Arc::new(HttpBackend::new(
                    format!("http:{url}"),
                    url,
                    ep.remote_model.clone().unwrap_or_else(|| profile.name.clone()),
                    api_key,
                    ep.extensions,
                    transport.clone(),
                ))
            }
        })
    }

    /// Registers every configured model. Replay mode never touches `transport`.
    pub fn build_gateway(
        &self,
        mode: BackendMode,
        fixtures_dir: &Path,
        transport: Arc<dyn Transport>,
    ) -> Result<Gateway, ConfigError> {
        let mut gw = Gateway::new(self.retry.clone());
        let fixtures = FixtureStore::new(fixtures_dir);
        for profile in &self.models {
            let backend: Arc<dyn Backend> = match mode {
                BackendMode::Replay => Arc::new(ReplayBackend::new(fixtures.clone())),
                BackendMode::Live => self.live_backend(profile, &transport)?,
                BackendMode::Record => Arc::new(RecordingBackend::new(
                    self.live_backend(profile, &transport)?,
                    fixtures.clone(),
                )),
            };
            gw.register(&profile.name, profile.role, backend);
        }
        Ok(gw)
    }
}
