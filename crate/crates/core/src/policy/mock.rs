//! Deterministic backends for tests and offline runs.
//!
//! * [`ScriptedBackend`] replays a fixture keyed by prompt hash.
//! * [`BigramBackend`] samples from and scores against a bigram table.
//! * [`InstrumentedBackend`] wraps any backend and records every call along
//!   with the peak number of concurrent calls.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backend::{
    prompt_hash, score_key, BackendError, FinishReason, Generation, GenerationRequest, PolicyBackend,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    pub text: String,
    /// Defaults to `default_token_logprob` per whitespace token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    /// Attempts numbered up to this value fail transiently.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fail_attempts: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub permanent_failure: bool,
    #[serde(default, skip_serializing_if = "is_zero_u64")]
    pub delay_ms: u64,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}
fn is_zero_u64(v: &u64) -> bool {
    *v == 0
}

impl ScriptedResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ScriptedResponse {
            text: text.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptScript {
    /// Candidate i receives `responses[i % len]`.
    pub responses: Vec<ScriptedResponse>,
}

/// On-disk mock fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockFixture {
    #[serde(default = "default_token_logprob")]
    pub default_token_logprob: f64,
    #[serde(default = "yes")]
    pub supports_scoring: bool,
    /// Prompt hash to script.
    #[serde(default)]
    pub prompts: BTreeMap<String, PromptScript>,
    /// `score_key(prompt, completion)` to per-token log-probabilities.
    #[serde(default)]
    pub scores: BTreeMap<String, Vec<f64>>,
}

fn default_token_logprob() -> f64 {
    -1.0
}
fn yes() -> bool {
    true
}

impl Default for MockFixture {
    fn default() -> Self {
        MockFixture {
            default_token_logprob: default_token_logprob(),
            supports_scoring: true,
            prompts: BTreeMap::new(),
            scores: BTreeMap::new(),
        }
    }
}

impl MockFixture {
    pub fn script(&mut self, prompt: &str, responses: Vec<ScriptedResponse>) -> &mut Self {
        self.prompts.insert(prompt_hash(prompt), PromptScript { responses });
        self
    }

    pub fn set_score(&mut self, prompt: &str, completion: &str, logprobs: Vec<f64>) -> &mut Self {
        self.scores.insert(score_key(prompt, completion), logprobs);
        self
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        fs::write(path, text)
    }
}

/// Replays a [`MockFixture`]. Stateless: failures are decided from the
/// request's attempt number, so reruns behave identically.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    fixture: MockFixture,
}

impl ScriptedBackend {
    pub fn new(fixture: MockFixture) -> Self {
        ScriptedBackend { fixture }
    }

    fn default_logprobs(&self, text: &str) -> Vec<f64> {
        vec![self.fixture.default_token_logprob; text.split_whitespace().count()]
    }
}

#[async_trait]
impl PolicyBackend for ScriptedBackend {
    async fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError> {
        let script = self
            .fixture
            .prompts
            .get(&prompt_hash(&req.prompt))
            .filter(|s| !s.responses.is_empty())
            .ok_or_else(|| BackendError::permanent("no script for prompt"))?;
        let resp = &script.responses[req.candidate_index % script.responses.len()];
        if resp.delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(resp.delay_ms)).await;
        }
        if resp.permanent_failure {
            return Err(BackendError::permanent("scripted permanent failure"));
        }
        if req.attempt <= resp.fail_attempts {
            return Err(BackendError::transient(format!(
                "scripted failure on attempt {}",
                req.attempt
            )));
        }
        let tokens: Vec<&str> = resp.text.split_whitespace().collect();
        let mut logprobs = resp
            .token_logprobs
            .clone()
            .unwrap_or_else(|| self.default_logprobs(&resp.text));
        if tokens.len() > req.max_tokens {
            logprobs.truncate(req.max_tokens);
            return Ok(Generation {
                text: tokens[..req.max_tokens].join(" "),
                token_logprobs: logprobs,
                finish_reason: FinishReason::Length,
            });
        }
        Ok(Generation {
            text: resp.text.clone(),
            token_logprobs: logprobs,
            finish_reason: FinishReason::Stop,
        })
    }

    async fn score(&self, prompt: &str, completion: &str) -> Result<Vec<f64>, BackendError> {
        if !self.fixture.supports_scoring {
            return Err(BackendError::unsupported("mock fixture has scoring disabled"));
        }
        if let Some(lp) = self.fixture.scores.get(&score_key(prompt, completion)) {
            return Ok(lp.clone());
        }
        let scripted = self
            .fixture
            .prompts
            .get(&prompt_hash(prompt))
            .and_then(|s| s.responses.iter().find(|r| r.text == completion))
            .and_then(|r| r.token_logprobs.clone());
        Ok(scripted.unwrap_or_else(|| self.default_logprobs(completion)))
    }
}

/// Context-free bigram policy over a whitespace-token vocabulary. The
/// prompt is ignored; every completion starts from the start context.
#[derive(Debug, Clone)]
pub struct BigramBackend {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    /// `vocab.len() + 1` rows (last row is the start context), each a
    /// distribution over `vocab`.
    table: Vec<Vec<f64>>,
    stop_token: Option<usize>,
}

impl BigramBackend {
    pub fn new(vocab: Vec<String>, table: Vec<Vec<f64>>, stop_token: Option<usize>) -> Result<Self, String> {
        let v = vocab.len();
        if v == 0 {
            return Err("empty vocabulary".into());
        }
        if table.len() != v + 1 {
            return Err(format!("expected {} rows, found {}", v + 1, table.len()));
        }
        for (r, row) in table.iter().enumerate() {
            if row.len() != v {
                return Err(format!("row {r} has {} entries, expected {v}", row.len()));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(format!("row {r} has an entry outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(format!("row {r} sums to {sum}"));
            }
        }
        if stop_token.is_some_and(|s| s >= v) {
            return Err("stop token outside vocabulary".into());
        }
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(BigramBackend {
            vocab,
            index,
            table,
            stop_token,
        })
    }

    pub fn uniform(vocab: Vec<String>) -> Self {
        let v = vocab.len();
        let table = vec![vec![1.0 / v as f64; v]; v + 1];
        BigramBackend::new(vocab, table, None).expect("uniform table is valid")
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn start(&self) -> usize {
        self.vocab.len()
    }

    pub fn conditional(&self, context: Option<usize>, token: usize) -> f64 {
        self.table[context.unwrap_or(self.start())][token]
    }
}

#[async_trait]
impl PolicyBackend for BigramBackend {
    async fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError> {
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let mut ctx = self.start();
        let mut words = Vec::new();
        let mut logprobs = Vec::new();
        let dists: Vec<WeightedIndex<f64>> = self
            .table
            .iter()
            .map(|row| WeightedIndex::new(row).expect("validated row"))
            .collect();
        let finish = loop {
            if words.len() == req.max_tokens {
                break FinishReason::Length;
            }
            let next = dists[ctx].sample(&mut rng);
            if Some(next) == self.stop_token {
                break FinishReason::Stop;
            }
            logprobs.push(self.table[ctx][next].ln());
            words.push(self.vocab[next].as_str());
            ctx = next;
        };
        Ok(Generation {
            text: words.join(" "),
            token_logprobs: logprobs,
            finish_reason: finish,
        })
    }

    async fn score(&self, _prompt: &str, completion: &str) -> Result<Vec<f64>, BackendError> {
        let mut ctx = self.start();
        let mut out = Vec::new();
        for word in completion.split_whitespace() {
            let tok = *self
                .index
                .get(word)
                .ok_or_else(|| BackendError::permanent(format!("token `{word}` not in vocabulary")))?;
            out.push(self.table[ctx][tok].ln());
            ctx = tok;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CallKind {
    Generate,
    Score,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub kind: CallKind,
    pub prompt_hash: String,
    pub candidate_index: usize,
    pub attempt: u32,
}

/// Records every call and tracks peak concurrency.
pub struct InstrumentedBackend {
    inner: Arc<dyn PolicyBackend>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    calls: Mutex<Vec<CallRecord>>,
}

impl InstrumentedBackend {
    pub fn new(inner: Arc<dyn PolicyBackend>) -> Self {
        InstrumentedBackend {
            inner,
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().unwrap().clone()
    }

    pub fn generate_calls_for(&self, prompt: &str) -> usize {
        let h = prompt_hash(prompt);
        self.calls
            .lock()
            .unwrap()
            .iter()
            .filter(|c| c.kind == CallKind::Generate && c.prompt_hash == h)
            .count()
    }

    fn enter(&self, record: CallRecord) -> InFlightGuard<'_> {
        self.calls.lock().unwrap().push(record);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        InFlightGuard(&self.in_flight)
    }
}

struct InFlightGuard<'a>(&'a AtomicUsize);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl PolicyBackend for InstrumentedBackend {
    async fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError> {
        let _guard = self.enter(CallRecord {
            kind: CallKind::Generate,
            prompt_hash: prompt_hash(&req.prompt),
            candidate_index: req.candidate_index,
            attempt: req.attempt,
        });
        self.inner.generate(req).await
    }

    async fn score(&self, prompt: &str, completion: &str) -> Result<Vec<f64>, BackendError> {
        let _guard = self.enter(CallRecord {
            kind: CallKind::Score,
            prompt_hash: prompt_hash(prompt),
            candidate_index: 0,
            attempt: 1,
        });
        self.inner.score(prompt, completion).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ClientLimits, FinishReason, PolicyClient, PolicyError, RetryPolicy, SamplingConfig};

    fn limits(max_in_flight: usize, max_attempts: u32) -> ClientLimits {
        ClientLimits {
            max_in_flight,
            retry: RetryPolicy {
                max_attempts,
                backoff_base_ms: 10,
                backoff_cap_ms: 40,
            },
            timeout: None,
        }
    }

    fn cfg(k: usize) -> SamplingConfig {
        SamplingConfig {
            num_samples: k,
            ..Default::default()
        }
    }

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|w| w.to_string()).collect()
    }

    #[tokio::test]
    async fn ten_scripted_candidates_in_order() {
        let mut fx = MockFixture::default();
        let responses = (0..10).map(|i| ScriptedResponse::text(format!("answer {i}"))).collect();
        fx.script("p", responses);
        let client = PolicyClient::new(Arc::new(ScriptedBackend::new(fx)), limits(3, 1)).unwrap();
        let cands = client.sample("id", "p", &cfg(10)).await.unwrap();
        assert_eq!(cands.len(), 10);
        for (i, c) in cands.iter().enumerate() {
            assert_eq!(c.index, i);
            assert_eq!(c.text, format!("answer {i}"));
            assert_eq!(c.finish_reason, FinishReason::Stop);
        }
    }

    #[tokio::test]
    async fn single_certain_token() {
        let mut fx = MockFixture::default();
        fx.script(
            "p",
            vec![ScriptedResponse {
                text: "7".into(),
                token_logprobs: Some(vec![0.0]),
                ..Default::default()
            }],
        );
        let client = PolicyClient::new(Arc::new(ScriptedBackend::new(fx)), limits(1, 1)).unwrap();
        let cands = client.sample("id", "p", &cfg(1)).await.unwrap();
        assert_eq!(cands[0].token_logprobs, vec![0.0]);
    }

    #[tokio::test(start_paused = true)]
    async fn fails_twice_then_succeeds() {
        let mut fx = MockFixture::default();
        fx.script(
            "p",
            vec![ScriptedResponse {
                text: "ok".into(),
                fail_attempts: 2,
                ..Default::default()
            }],
        );
        let inst = Arc::new(InstrumentedBackend::new(Arc::new(ScriptedBackend::new(fx))));
        let client = PolicyClient::new(inst.clone(), limits(1, 3)).unwrap();
        let cands = client.sample("id", "p", &cfg(1)).await.unwrap();
        assert_eq!(cands[0].attempts, 3);
        assert_eq!(cands[0].text, "ok");
        let attempts: Vec<u32> = inst.calls().iter().map(|c| c.attempt).collect();
        assert_eq!(attempts, vec![1, 2, 3]);
    }

    #[tokio::test(start_paused = true)]
    async fn partial_failures_become_error_candidates() {
        let mut fx = MockFixture::default();
        fx.script(
            "p",
            vec![
                ScriptedResponse::text("fine"),
                ScriptedResponse {
                    text: "never".into(),
                    fail_attempts: 5,
                    ..Default::default()
                },
            ],
        );
        let client = PolicyClient::new(Arc::new(ScriptedBackend::new(fx)), limits(2, 2)).unwrap();
        let cands = client.sample("id", "p", &cfg(4)).await.unwrap();
        assert_eq!(cands.len(), 4);
        assert_eq!(cands[1].finish_reason, FinishReason::Error);
        assert!(cands[1].text.is_empty());
        assert_eq!(cands[1].attempts, 2);
        assert_eq!(cands[2].finish_reason, FinishReason::Stop);
    }

    #[tokio::test]
    async fn all_failures_are_a_batch_error() {
        let client = PolicyClient::new(Arc::new(ScriptedBackend::new(MockFixture::default())), limits(2, 3)).unwrap();
        match client.sample("id", "unscripted", &cfg(3)).await {
            Err(PolicyError::Batch { causes, .. }) => assert_eq!(causes.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[tokio::test]
    async fn truncation_sets_length() {
        let mut fx = MockFixture::default();
        fx.script("p", vec![ScriptedResponse::text("a b c d e")]);
        let client = PolicyClient::new(Arc::new(ScriptedBackend::new(fx)), limits(1, 1)).unwrap();
        let c = SamplingConfig {
            num_samples: 1,
            max_response_tokens: 3,
            ..Default::default()
        };
        let cands = client.sample("id", "p", &c).await.unwrap();
        assert_eq!(cands[0].finish_reason, FinishReason::Length);
        assert_eq!(cands[0].token_logprobs.len(), 3);
        assert_eq!(cands[0].text, "a b c");
    }

    #[tokio::test]
    async fn uniform_scoring() {
        let backend = BigramBackend::uniform(words(&["a", "b", "c", "d"]));
        let client = PolicyClient::new(Arc::new(backend), limits(1, 1)).unwrap();
        let lp = client.score_logprobs("prompt", "a c d").await.unwrap();
        assert_eq!(lp, vec![(0.25f64).ln(); 3]);
    }

    #[tokio::test]
    async fn certain_tokens_score_zero() {
        let table = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let backend = BigramBackend::new(words(&["x", "y"]), table, None).unwrap();
        let client = PolicyClient::new(Arc::new(backend), limits(1, 1)).unwrap();
        assert_eq!(client.score_logprobs("", "x y x y").await.unwrap(), vec![0.0; 4]);
    }

    #[tokio::test]
    async fn bigram_scoring_matches_chain_product() {
        // rows: after "a", after "b", start
        let table = vec![vec![0.1, 0.9], vec![0.6, 0.4], vec![0.3, 0.7]];
        let backend = BigramBackend::new(words(&["a", "b"]), table, None).unwrap();
        let client = PolicyClient::new(Arc::new(backend), limits(1, 1)).unwrap();
        let lp = client.score_logprobs("", "b a a b").await.unwrap();
        // P(b|start)=0.7, P(a|b)=0.6, P(a|a)=0.1, P(b|a)=0.9
        let expected = [0.7f64, 0.6, 0.1, 0.9];
        for (got, p) in lp.iter().zip(expected) {
            assert!((got - p.ln()).abs() < 1e-15);
        }
        let product: f64 = expected.iter().product();
        assert!((lp.iter().sum::<f64>() - product.ln()).abs() < 1e-12);
    }

    #[tokio::test]
    async fn empty_completion_is_rejected() {
        let client = PolicyClient::new(Arc::new(BigramBackend::uniform(words(&["a"]))), limits(1, 1)).unwrap();
        assert!(matches!(
            client.score_logprobs("p", "").await,
            Err(PolicyError::EmptyCompletion)
        ));
    }

    #[tokio::test]
    async fn scoring_capability_error() {
        let fx = MockFixture {
            supports_scoring: false,
            ..Default::default()
        };
        let client = PolicyClient::new(Arc::new(ScriptedBackend::new(fx)), limits(1, 3)).unwrap();
        assert!(matches!(
            client.score_logprobs("p", "x").await,
            Err(PolicyError::Capability(_))
        ));
    }

    fn bigram_with_stop() -> BigramBackend {
        let table = vec![
            vec![0.2, 0.5, 0.3],
            vec![0.4, 0.2, 0.4],
            vec![0.1, 0.1, 0.8],
            vec![0.5, 0.5, 0.0],
        ];
        BigramBackend::new(words(&["a", "b", "</s>"]), table, Some(2)).unwrap()
    }

    #[tokio::test]
    async fn sampled_logprobs_match_scoring() {
        let client = PolicyClient::new(Arc::new(bigram_with_stop()), limits(4, 1)).unwrap();
        let c = SamplingConfig {
            num_samples: 20,
            max_response_tokens: 12,
            seed: 7,
            ..Default::default()
        };
        for cand in client.sample("id", "prompt", &c).await.unwrap() {
            if cand.text.is_empty() {
                continue;
            }
            let scored = client.score_logprobs("prompt", &cand.text).await.unwrap();
            assert_eq!(scored, cand.token_logprobs);
            assert!((scored.iter().sum::<f64>() - cand.total_logprob()).abs() < 1e-12);
        }
    }

    #[tokio::test]
    async fn fixed_seed_is_byte_identical() {
        let c = SamplingConfig {
            num_samples: 8,
            max_response_tokens: 10,
            seed: 42,
            ..Default::default()
        };
        let run = || async {
            let client = PolicyClient::new(Arc::new(bigram_with_stop()), limits(3, 1)).unwrap();
            serde_json::to_vec(&client.sample("id", "prompt", &c).await.unwrap()).unwrap()
        };
        assert_eq!(run().await, run().await);
    }

    #[test]
    fn fixture_file_round_trip() {
        let mut fx = MockFixture::default();
        fx.script("p", vec![ScriptedResponse::text("x")])
            .set_score("p", "y", vec![-0.5]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.json");
        fx.save(&path).unwrap();
        assert_eq!(MockFixture::load(&path).unwrap(), fx);
    }

    #[test]
    fn bigram_table_validation() {
        assert!(BigramBackend::new(words(&["a"]), vec![vec![0.5]], None).is_err());
        assert!(BigramBackend::new(words(&["a"]), vec![vec![1.0], vec![0.9]], None).is_err());
    }
}
