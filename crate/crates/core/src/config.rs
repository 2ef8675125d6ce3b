//! Run configuration. Precedence, lowest first: built-in defaults, the TOML
//! file, `CAC_*` environment variables, command-line flags (applied by the
//! caller after `load`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::embedder::EmbedderConfig;
use crate::eval::FanProbeConfig;
use crate::teacher::CompileConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("environment variable {name}: {message}")]
    Env { name: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    /// Extra origin allowed by CORS, e.g. a separately served inspector UI.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ui_origin: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8787,
            ui_origin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub kb: PathBuf,
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            kb: "kb.jsonl".into(),
            out: "runs".into(),
            corpus: None,
        }
    }
}

/// Paths of backend profile files (see the CLI for the profile format).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    /// Named agent profiles selectable per HTTP run request.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub profiles: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacConfig {
    pub embedder: EmbedderConfig,
    pub agent: AgentConfig,
    pub compile: CompileConfig,
    pub server: ServerConfig,
    pub paths: PathsConfig,
    pub backends: BackendsConfig,
    pub probe: FanProbeConfig,
}

impl CacConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Defaults, overlaid by `path` if given, then by the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_owned(),
                    source,
                })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|name| std::env::var(name).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `CAC_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(name: &str, v: &str) -> Result<T, ConfigError> {
            v.parse().map_err(|_| ConfigError::Env {
                name: name.into(),
                message: format!("cannot parse `{v}`"),
            })
        }
        if let Some(v) = var("CAC_KB") {
            self.paths.kb = v.into();
        }
        if let Some(v) = var("CAC_OUT") {
            self.paths.out = v.into();
        }
        if let Some(v) = var("CAC_CORPUS") {
            self.paths.corpus = Some(v.into());
        }
        if let Some(v) = var("CAC_HOST") {
            self.server.host = v;
        }
        if let Some(v) = var("CAC_PORT") {
            self.server.port = parse("CAC_PORT", &v)?;
        }
        if let Some(v) = var("CAC_UI_ORIGIN") {
            self.server.ui_origin = Some(v);
        }
        if let Some(v) = var("CAC_AGENT_PROFILE") {
            self.backends.agent = Some(v.into());
        }
        if let Some(v) = var("CAC_TEACHER_PROFILE") {
            self.backends.teacher = Some(v.into());
        }
        if let Some(v) = var("CAC_MAX_ITERATIONS") {
            self.compile.max_iterations = parse("CAC_MAX_ITERATIONS", &v)?;
        }
        if let Some(v) = var("CAC_MAX_STEPS") {
            self.agent.max_steps = parse("CAC_MAX_STEPS", &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.embedder
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let a = &self.agent;
        if a.g0.trim().is_empty() {
            return Err(ConfigError::Invalid("agent.g0 is empty".into()));
        }
        if a.max_steps == 0 || a.wm_capacity == 0 || a.goal_depth_cap == 0 || a.retrieval_k == 0 {
            return Err(ConfigError::Invalid(
                "agent.max_steps, wm_capacity, goal_depth_cap and retrieval_k must be positive".into(),
            ));
        }
        if self.probe.step == 0 {
            return Err(ConfigError::Invalid("probe.step must be positive".into()));
        }
        if self.compile.max_iterations == 0 || self.compile.tool_call_cap == 0 {
            return Err(ConfigError::Invalid(
                "compile.max_iterations and tool_call_cap must be positive".into(),
            ));
        }
        Ok(())
    }
}
