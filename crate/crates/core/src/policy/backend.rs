use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

/// One generation attempt as seen by a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    /// Position of this candidate among the k drawn for the prompt.
    pub candidate_index: usize,
    /// 1-based attempt number; retries reuse the same request with a higher value.
    pub attempt: u32,
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendErrorKind {
    /// Worth retrying: timeouts, connection failures, 429 and 5xx responses.
    Transient,
    Permanent,
    /// The backend cannot do what was asked (e.g. no teacher-forced scoring).
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendError {
    pub kind: BackendErrorKind,
    pub message: String,
}

impl BackendError {
    pub fn transient(message: impl Into<String>) -> Self {
        BackendError {
            kind: BackendErrorKind::Transient,
            message: message.into(),
        }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        BackendError {
            kind: BackendErrorKind::Permanent,
            message: message.into(),
        }
    }

    pub fn unsupported(message: impl Into<String>) -> Self {
        BackendError {
            kind: BackendErrorKind::Unsupported,
            message: message.into(),
        }
    }

    pub fn is_retryable(&self) -> bool {
        self.kind == BackendErrorKind::Transient
    }
}

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            BackendErrorKind::Transient => "transient",
            BackendErrorKind::Permanent => "permanent",
            BackendErrorKind::Unsupported => "unsupported",
        };
        write!(f, "{kind}: {}", self.message)
    }
}

impl std::error::Error for BackendError {}

/// A source of samples and teacher-forced scores from the target policy.
#[async_trait]
pub trait PolicyBackend: Send + Sync {
    async fn generate(&self, request: &GenerationRequest) -> Result<Generation, BackendError>;

    /// Natural-log probability of each token of `completion` given `prompt`.
    async fn score(&self, prompt: &str, completion: &str) -> Result<Vec<f64>, BackendError>;
}

#[async_trait]
impl<B: PolicyBackend + ?Sized> PolicyBackend for Arc<B> {
    async fn generate(&self, request: &GenerationRequest) -> Result<Generation, BackendError> {
        (**self).generate(request).await
    }

    async fn score(&self, prompt: &str, completion: &str) -> Result<Vec<f64>, BackendError> {
        (**self).score(prompt, completion).await
    }
}

/// Hex SHA-256 of a prompt; the key mock fixtures are indexed by.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Key for a scripted teacher-forced score.
pub fn score_key(prompt: &str, completion: &str) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0u8]);
    h.update(completion.as_bytes());
    hex::encode(h.finalize())
}

/// Per-candidate seed so candidate i of a prompt is reproducible on its own.
pub fn candidate_seed(run_seed: u64, prompt: &str, candidate_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update((candidate_index as u64).to_le_bytes());
    h.update(prompt.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
