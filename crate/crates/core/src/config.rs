//! TOML configuration: backend, toolchain, traversal, evaluation, and agent
//! sections. Relative paths resolve against the config file's directory;
//! environment variables override auth secrets only.

use crate::agents::{AgentContext, CommentStyle, ParamOverride, PromptSet};
use crate::backend::{CompletionBackend, HttpBackend, ScriptedBackend};
use crate::eval::EvalConfig;
use crate::harness::{Toolchain, ToolchainConfig};
use crate::traversal::TraversalConfig;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad config: {0}")]
    Parse(String),
    #[error("harness: {0}")]
    Harness(#[from] crate::harness::HarnessError),
    #[error("backend: {0}")]
    Backend(#[from] crate::backend::BackendError),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Scripted {
        script: PathBuf,
    },
    Http {
        endpoint: String,
        model: String,
        /// Name of the env var holding the bearer token.
        #[serde(default = "default_auth_env")]
        auth_env: String,
        #[serde(default)]
        request_logprobs: bool,
    },
}

fn default_auth_env() -> String {
    "REDRAFT_API_TOKEN".to_string()
}

fn default_feedback_budget() -> usize {
    2000
}

#[derive(Debug, Clone, Deserialize)]
pub struct AgentFileConfig {
    #[serde(default)]
    pub comment_open: Option<String>,
    #[serde(default)]
    pub comment_close: Option<String>,
    #[serde(default = "default_feedback_budget")]
    pub feedback_budget: usize,
    /// Directory of template overrides (same file names as the built-ins).
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    /// Per-role generation parameter overrides, keyed by role name.
    #[serde(default)]
    pub roles: BTreeMap<String, ParamOverride>,
}

impl Default for AgentFileConfig {
    fn default() -> Self {
        Self {
            comment_open: None,
            comment_close: None,
            feedback_budget: default_feedback_budget(),
            template_dir: None,
            roles: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct AppConfig {
    pub backend: BackendConfig,
    pub toolchain: ToolchainConfig,
    #[serde(default)]
    pub traversal: TraversalConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub agents: AgentFileConfig,
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let content = std::fs::read_to_string(path)?;
        let mut config: AppConfig =
            toml::from_str(&content).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        if let BackendConfig::Scripted { script } = &mut config.backend {
            resolve(&base, script);
        }
        resolve(&base, &mut config.toolchain.workdir);
        if let Some(dir) = &mut config.agents.template_dir {
            resolve(&base, dir);
        }
        Ok(config)
    }

    pub fn build_backend(&self) -> Result<Box<dyn CompletionBackend>, ConfigError> {
        match &self.backend {
            BackendConfig::Scripted { script } => {
                Ok(Box::new(ScriptedBackend::from_file(script)?))
            }
            BackendConfig::Http { endpoint, model, auth_env, request_logprobs } => {
                let token = std::env::var(auth_env).ok();
                let mut backend = HttpBackend::new(endpoint.clone(), token, model.clone());
                backend.request_logprobs = *request_logprobs;
                Ok(Box::new(backend))
            }
        }
    }

    pub fn build_toolchain(&self) -> Result<Toolchain, ConfigError> {
        Ok(Toolchain::new(self.toolchain.clone())?)
    }

    pub fn build_agent_context(&self) -> Result<AgentContext, ConfigError> {
        let prompts = match &self.agents.template_dir {
            Some(dir) => PromptSet::from_dir(dir)?,
            None => PromptSet::default(),
        };
        let mut comment = CommentStyle::default();
        if let Some(open) = &self.agents.comment_open {
            comment.open = open.clone();
        }
        if let Some(close) = &self.agents.comment_close {
            comment.close = close.clone();
        }
        Ok(AgentContext {
            prompts,
            comment,
            feedback_budget: self.agents.feedback_budget,
            param_overrides: self.agents.roles.clone(),
        })
    }
}
