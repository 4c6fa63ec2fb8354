//! Run configuration: one JSON document shared by every subcommand.
//!
//! ```json
//! {
//!   "corpus_path": "data/train.jsonl",
//!   "output_dir": "out",
//!   "seed": 7,
//!   "endpoint": {"endpoint_url": "http://localhost:8000", "model": "qwen"},
//!   "sampling": {"num_samples": 10, "temperature": 1.0},
//!   "template": "digest-retell",
//!   "max_tokens": 8192
//! }
//! ```
//!
//! `template` is either a builtin template name or a path to a template file.
//! The config digest covers the resolved config (minus the output directory),
//! the retell template version, and the answer-normalization version.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::Aggregation;
use crate::policy::{ClientPolicy, SamplingConfig};
use crate::rewriter::{ProblemPromptTemplate, RetellPromptTemplate, BUILTIN_RETELL_NAME};
use crate::verifier::NORMALIZATION_VERSION;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{what} {path} does not exist")]
    MissingPath { what: &'static str, path: PathBuf },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_path: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub endpoint: ClientPolicy,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_template: Option<String>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Timestamp written into output headers. When absent, the
    /// `SOURCE_DATE_EPOCH` environment variable or the current time is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

fn default_template() -> String {
    BUILTIN_RETELL_NAME.into()
}

fn default_max_tokens() -> usize {
    8192
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    fn template_is_builtin(&self) -> bool {
        RetellPromptTemplate::by_name(&self.template).is_some()
    }

    /// Checks values and that every input path exists. The output directory
    /// is not required to exist.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sampling
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.endpoint
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.max_tokens == 0 {
            return Err(ConfigError::Invalid("max_tokens must be at least 1".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(ConfigError::Invalid("output_dir is empty".into()));
        }
        let mut inputs = vec![("corpus", self.corpus_path.clone())];
        if !self.template_is_builtin() {
            inputs.push(("template", PathBuf::from(&self.template)));
        }
        if let Some(fixture) = &self.endpoint.mock_fixture {
            inputs.push(("mock fixture", fixture.clone()));
        }
        for (what, path) in inputs {
            if !path.exists() {
                return Err(ConfigError::MissingPath { what, path });
            }
        }
        Ok(())
    }

    /// Validates, loads templates, and computes the digest.
    pub fn resolve(mut self) -> Result<ResolvedConfig, ConfigError> {
        self.sampling.seed = self.seed;
        self.validate()?;
        let retell_template = match RetellPromptTemplate::by_name(&self.template) {
            Some(t) => t,
            None => RetellPromptTemplate::from_file(Path::new(&self.template))
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
        };
        let problem_template = match &self.problem_template {
            Some(t) => ProblemPromptTemplate::new(t.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => ProblemPromptTemplate::default(),
        };
        let digest = config_digest(&self, &retell_template);
        Ok(ResolvedConfig {
            config: self,
            retell_template,
            problem_template,
            digest,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub retell_template: RetellPromptTemplate,
    pub problem_template: ProblemPromptTemplate,
    pub digest: String,
}

/// SHA-256 over the canonical JSON of the config (keys sorted), the retell
/// template identity, and the normalization version. The output directory
/// is left out: it decides where results go, not what they contain.
pub fn config_digest(config: &RunConfig, template: &RetellPromptTemplate) -> String {
    let mut value = serde_json::to_value(config).expect("config serializes");
    if let Some(fields) = value.as_object_mut() {
        fields.remove("output_dir");
    }
    let canonical = serde_json::to_string(&value).expect("value serializes");
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    h.update([0u8]);
    h.update(template.name.as_bytes());
    h.update([0u8]);
    h.update(template.version.as_bytes());
    h.update([0u8]);
    h.update(NORMALIZATION_VERSION.as_bytes());
    hex::encode(h.finalize())
}
