//! Sampling candidates and scoring completions under the target policy.
//!
//! [`PolicyClient`] adds bounded concurrency and retries on top of any
//! [`PolicyBackend`]. Each of the k candidates for a prompt is an
//! independent request; a candidate whose retries run out is kept as an
//! `Error` candidate, and only a prompt whose every candidate failed is an
//! error for the caller.

mod backend;
pub mod http;
pub mod mock;

use std::sync::Arc;
use std::time::Duration;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use backend::{
    candidate_seed, prompt_hash, score_key, BackendError, BackendErrorKind, FinishReason, Generation,
    GenerationRequest, PolicyBackend,
};

pub const DEFAULT_NUM_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_response_tokens")]
    pub max_response_tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_num_samples() -> usize {
    DEFAULT_NUM_SAMPLES
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_response_tokens() -> usize {
    4096
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            num_samples: DEFAULT_NUM_SAMPLES,
            temperature: default_temperature(),
            max_response_tokens: default_max_response_tokens(),
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.num_samples == 0 {
            return Err(PolicyError::InvalidConfig("num_samples must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::InvalidConfig(format!(
                "temperature must be a finite nonnegative number, got {}",
                self.temperature
            )));
        }
        if self.max_response_tokens == 0 {
            return Err(PolicyError::InvalidConfig(
                "max_response_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 500,
            backoff_cap_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay after the `failed_attempt`-th failure: exponential, capped.
    pub fn backoff(&self, failed_attempt: u32) -> Duration {
        let shift = failed_attempt.saturating_sub(1).min(32);
        let ms = self.backoff_base_ms.saturating_mul(1u64 << shift);
        Duration::from_millis(ms.min(self.backoff_cap_ms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireProtocol {
    #[default]
    Chat,
    Completions,
}

/// Endpoint settings. The API key is only ever read from the environment
/// variable named here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientPolicy {
    #[serde(default)]
    pub endpoint_url: String,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub protocol: WireProtocol,
    /// Scripted mock fixture used instead of the HTTP endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_fixture: Option<std::path::PathBuf>,
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_max_in_flight() -> usize {
    16
}
fn default_timeout_ms() -> u64 {
    120_000
}

impl Default for ClientPolicy {
    fn default() -> Self {
        ClientPolicy {
            endpoint_url: String::new(),
            model: String::new(),
            api_key_env: default_api_key_env(),
            max_in_flight: default_max_in_flight(),
            retry: RetryPolicy::default(),
            timeout_ms: default_timeout_ms(),
            protocol: WireProtocol::Chat,
            mock_fixture: None,
        }
    }
}

impl ClientPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.max_in_flight == 0 {
            return Err(PolicyError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(PolicyError::InvalidConfig(
                "retry.max_attempts must be at least 1".into(),
            ));
        }
        if self.mock_fixture.is_none() && self.endpoint_url.is_empty() {
            return Err(PolicyError::InvalidConfig(
                "either endpoint_url or mock_fixture must be set".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub problem_id: String,
    pub index: usize,
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub finish_reason: FinishReason,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Candidate {
    pub fn total_logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("all {} candidates for `{problem_id}` failed: {}", causes.len(), causes.join("; "))]
    Batch { problem_id: String, causes: Vec<String> },
    #[error("{0}; configure a score-capable endpoint or the mock backend")]
    Capability(String),
    #[error("request failed after {attempts} attempt(s): {source}")]
    Request {
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("invalid client configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot score an empty completion")]
    EmptyCompletion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientLimits {
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub timeout: Option<Duration>,
}

impl From<&ClientPolicy> for ClientLimits {
    fn from(p: &ClientPolicy) -> Self {
        ClientLimits {
            max_in_flight: p.max_in_flight,
            retry: p.retry,
            timeout: (p.timeout_ms > 0).then(|| Duration::from_millis(p.timeout_ms)),
        }
    }
}

/// Shareable handle over a backend. Every backend call, including each retry,
/// holds one of `max_in_flight` permits; permits are released during backoff.
#[derive(Clone)]
pub struct PolicyClient {
    backend: Arc<dyn PolicyBackend>,
    permits: Arc<Semaphore>,
    limits: ClientLimits,
}

impl PolicyClient {
    pub fn new(backend: Arc<dyn PolicyBackend>, limits: ClientLimits) -> Result<Self, PolicyError> {
        if limits.max_in_flight == 0 {
            return Err(PolicyError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        if limits.retry.max_attempts == 0 {
            return Err(PolicyError::InvalidConfig(
                "retry.max_attempts must be at least 1".into(),
            ));
        }
        Ok(PolicyClient {
            backend,
            permits: Arc::new(Semaphore::new(limits.max_in_flight)),
            limits,
        })
    }

    /// The scripted mock backend when `mock_fixture` is set, the HTTP
    /// backend otherwise.
    pub fn from_policy(policy: &ClientPolicy) -> Result<Self, PolicyError> {
        policy.validate()?;
        let backend: Arc<dyn PolicyBackend> = match &policy.mock_fixture {
            Some(path) => {
                let fixture = mock::MockFixture::load(path).map_err(|e| {
                    PolicyError::InvalidConfig(format!("cannot load mock fixture {}: {e}", path.display()))
                })?;
                Arc::new(mock::ScriptedBackend::new(fixture))
            }
            None => {
                Arc::new(http::OpenAiBackend::from_policy(policy).map_err(|e| PolicyError::InvalidConfig(e.message))?)
            }
        };
        Self::new(backend, ClientLimits::from(policy))
    }

    pub fn limits(&self) -> ClientLimits {
        self.limits
    }

    /// Draws `cfg.num_samples` candidates for one prompt, in request order.
    pub async fn sample(
        &self,
        problem_id: &str,
        prompt: &str,
        cfg: &SamplingConfig,
    ) -> Result<Vec<Candidate>, PolicyError> {
        cfg.validate()?;
        let requests = (0..cfg.num_samples).map(|index| GenerationRequest {
            prompt: prompt.to_string(),
            candidate_index: index,
            attempt: 1,
            temperature: cfg.temperature,
            max_tokens: cfg.max_response_tokens,
            seed: candidate_seed(cfg.seed, prompt, index),
        });
        let results = join_all(requests.map(|req| self.generate_with_retry(req))).await;

        let mut causes = Vec::new();
        let mut candidates = Vec::with_capacity(results.len());
        for (index, (result, attempts)) in results.into_iter().enumerate() {
            let candidate = match result {
                Ok(generation) => Candidate {
                    problem_id: problem_id.to_string(),
                    index,
                    text: generation.text,
                    token_logprobs: generation.token_logprobs,
                    finish_reason: generation.finish_reason,
                    attempts,
                    error: None,
                },
                Err(err) => {
                    causes.push(format!("candidate {index}: {err}"));
                    Candidate {
                        problem_id: problem_id.to_string(),
                        index,
                        text: String::new(),
                        token_logprobs: Vec::new(),
                        finish_reason: FinishReason::Error,
                        attempts,
                        error: Some(err.to_string()),
                    }
                }
            };
            candidates.push(candidate);
        }
        if causes.len() == candidates.len() {
            return Err(PolicyError::Batch {
                problem_id: problem_id.to_string(),
                causes,
            });
        }
        Ok(candidates)
    }

    /// Teacher-forced per-token log-probabilities of `completion` after `prompt`.
    pub async fn score_logprobs(&self, prompt: &str, completion: &str) -> Result<Vec<f64>, PolicyError> {
        if completion.is_empty() {
            return Err(PolicyError::EmptyCompletion);
        }
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.permits.acquire().await.expect("semaphore closed");
                self.with_timeout(self.backend.score(prompt, completion)).await
            };
            let err = match result.and_then(check_logprobs) {
                Ok(lp) => return Ok(lp),
                Err(err) => err,
            };
            match err.kind {
                BackendErrorKind::Unsupported => return Err(PolicyError::Capability(err.message)),
                BackendErrorKind::Transient if attempt < self.limits.retry.max_attempts => {
                    tokio::time::sleep(self.limits.retry.backoff(attempt)).await;
                }
                _ => {
                    return Err(PolicyError::Request {
                        attempts: attempt,
                        source: err,
                    })
                }
            }
        }
    }

    async fn generate_with_retry(&self, mut req: GenerationRequest) -> (Result<Generation, BackendError>, u32) {
        loop {
            let result = {
                let _permit = self.permits.acquire().await.expect("semaphore closed");
                self.with_timeout(self.backend.generate(&req)).await
            };
            let result = result.and_then(|g| {
                let token_logprobs = check_logprobs(g.token_logprobs)?;
                Ok(Generation { token_logprobs, ..g })
            });
            match result {
                Err(err) if err.is_retryable() && req.attempt < self.limits.retry.max_attempts => {
                    tokio::time::sleep(self.limits.retry.backoff(req.attempt)).await;
                    req.attempt += 1;
                }
                other => return (other, req.attempt),
            }
        }
    }

    async fn with_timeout<T>(
        &self,
        fut: impl std::future::Future<Output = Result<T, BackendError>>,
    ) -> Result<T, BackendError> {
        match self.limits.timeout {
            Some(limit) => tokio::time::timeout(limit, fut)
                .await
                .unwrap_or_else(|_| Err(BackendError::transient(format!("timed out after {limit:?}")))),
            None => fut.await,
        }
    }
}

/// Log-probabilities must be finite and nonpositive; rounding noise just
/// above zero is clamped.
fn check_logprobs(mut lp: Vec<f64>) -> Result<Vec<f64>, BackendError> {
    for v in &mut lp {
        if !v.is_finite() || *v > 1e-6 {
            return Err(BackendError::permanent(format!("invalid token logprob {v}")));
        }
        if *v > 0.0 {
            *v = 0.0;
        }
    }
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_is_capped_and_nondecreasing() {
        let retry = RetryPolicy {
            max_attempts: 10,
            backoff_base_ms: 100,
            backoff_cap_ms: 1_000,
        };
        let delays: Vec<_> = (1..=10).map(|a| retry.backoff(a).as_millis()).collect();
        assert_eq!(&delays[..5], &[100, 200, 400, 800, 1000]);
        assert!(delays.windows(2).all(|w| w[0] <= w[1]));
        assert!(delays.iter().all(|&d| d <= 1_000));
        assert_eq!(retry.backoff(u32::MAX).as_millis(), 1_000);
    }

    #[test]
    fn sampling_config_validation() {
        assert!(SamplingConfig::default().validate().is_ok());
        let bad = SamplingConfig {
            num_samples: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SamplingConfig {
            temperature: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn defaults_follow_sampling_protocol() {
        let cfg: SamplingConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.num_samples, 10);
        assert_eq!(cfg.temperature, 1.0);
    }

    #[test]
    fn logprob_check() {
        assert_eq!(check_logprobs(vec![-1.0, 1e-9]).unwrap(), vec![-1.0, 0.0]);
        assert!(check_logprobs(vec![0.5]).is_err());
        assert!(check_logprobs(vec![f64::NAN]).is_err());
    }
}
