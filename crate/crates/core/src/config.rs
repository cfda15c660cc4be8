//! The TOML configuration file shared by every subcommand. Every section and
//! every key is optional; missing values take the built-in defaults.
//!
//! ```toml
//! [endpoint]
//! base_url = "https://api.openai.com/v1"
//! model = "gpt-4"
//!
//! [plan]
//! temperatures = [0.0, 0.5, 1.0]
//! replicates = 30
//!
//! [analysis]
//! window = 8
//!
//! [analysis.thresholds]
//! first_flip = 0.6
//!
//! [human.min_mse]
//! value = 0.24
//! citation = "..."
//! ```
//!
//! The API key is never read from this file, only from the environment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{load_human_baselines, BaselineError, HumanOverrides};
use crate::collector::{default_plan, EndpointConfig, SweepPlan};
use crate::report::ReportOptions;
use crate::sequence::{ResponseParser, DEFAULT_REFUSAL_LEXICON};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Human(#[from] BaselineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParserConfig {
    pub refusal_lexicon: Vec<String>,
}

impl Default for ParserConfig {
    fn default() -> Self {
        Self { refusal_lexicon: DEFAULT_REFUSAL_LEXICON.iter().map(|s| s.to_string()).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub endpoint: EndpointConfig,
    pub plan: SweepPlan,
    pub analysis: ReportOptions,
    pub parser: ParserConfig,
    /// File of human constant overrides, applied before `human`.
    pub human_baselines: Option<PathBuf>,
    /// Inline human constant overrides.
    pub human: HumanOverrides,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            endpoint: EndpointConfig::default(),
            plan: default_plan(),
            analysis: ReportOptions::default(),
            parser: ParserConfig::default(),
            human_baselines: None,
            human: HumanOverrides::new(),
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut config: Config = toml::from_str(text)
            .map_err(|e| ConfigError::Malformed { path: origin.to_path_buf(), message: e.to_string() })?;
        config.resolve_human(origin.parent())?;
        Ok(config)
    }

    /// Folds the human override file and inline overrides into the analysis
    /// options. A relative override path is taken from the config's directory.
    fn resolve_human(&mut self, base: Option<&Path>) -> Result<(), ConfigError> {
        let file = self.human_baselines.as_ref().map(|p| match base {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.clone(),
        });
        let registry = load_human_baselines(file.as_deref())?;
        self.analysis.human = registry.with_overrides(&self.human)?;
        Ok(())
    }

    pub fn parser(&self) -> ResponseParser {
        ResponseParser::new(self.parser.refusal_lexicon.iter())
    }

    /// SHA-256 of the resolved configuration, without any secret.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// The file at `path`, or the defaults when no path is given.
pub fn load_config(path: Option<&Path>) -> Result<Config, ConfigError> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ConfigError::Io { path: p.to_path_buf(), source: e })?;
            Config::from_toml_str(&text, p)
        }
    }
}
