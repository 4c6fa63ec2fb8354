//! The rewriting operator: route each problem through self-alignment, then
//! guided (digest-and-retell) alignment, then fall back to the expert
//! demonstration.
//!
//! In both sampling stages k candidates are drawn, each is verified against
//! the gold answer, and one correct candidate is kept uniformly at random.
//! Selection randomness comes from a substream keyed by (run seed, stage,
//! problem id), so results do not depend on scheduling order.

mod checkpoint;
mod template;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use futures::stream::{self, StreamExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use checkpoint::{Ledger, LedgerHeader, LEDGER_SCHEMA_VERSION};
pub use template::{
    ProblemPromptTemplate, RetellPromptTemplate, BUILTIN_RETELL_NAME, BUILTIN_RETELL_VERSION, DEFAULT_PROBLEM_TEMPLATE,
    REFERENCE_SOLUTION, STATEMENT,
};

use crate::corpus::{MixtureDataset, MixtureHeader, Problem, Provenance, RewrittenExample};
use crate::policy::{Candidate, FinishReason, PolicyClient, PolicyError, SamplingConfig};
use crate::verifier::Verifier;

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("template error: {0}")]
    Template(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Per-problem routing record, one ledger line each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub problem_id: String,
    pub stage_reached: Provenance,
    pub self_correct_count: usize,
    pub retell_correct_count: usize,
    /// Position drawn among the correct candidates of the deciding stage.
    pub rng_draw: Option<u64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub endpoint_error: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub outcome: StageOutcome,
    pub example: RewrittenExample,
}

/// A kept candidate plus the draw that chose it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub example: RewrittenExample,
    pub rng_draw: u64,
}

#[derive(Debug, Clone)]
pub struct RewriteSettings {
    pub sampling: SamplingConfig,
    pub seed: u64,
    pub problem_template: ProblemPromptTemplate,
    pub retell_template: RetellPromptTemplate,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub checkpoint: Option<&'a Path>,
    /// Stop after this many newly completed problems; the ledger keeps them
    /// for a later resume.
    pub halt_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RewriteRun {
    Complete {
        dataset: MixtureDataset,
        outcomes: Vec<StageOutcome>,
    },
    Partial {
        completed: usize,
        remaining: usize,
    },
}

/// Seeded generator for one (stage, problem) pair.
pub fn selection_rng(seed: u64, stage: Provenance, problem_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_str().as_bytes());
    h.update([0u8]);
    h.update(problem_id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub struct Rewriter {
    client: PolicyClient,
    verifier: Verifier,
    settings: RewriteSettings,
}

impl Rewriter {
    pub fn new(client: PolicyClient, verifier: Verifier, settings: RewriteSettings) -> Result<Self, RewriteError> {
        settings.retell_template.validate()?;
        settings.sampling.validate()?;
        Ok(Rewriter {
            client,
            verifier,
            settings,
        })
    }

    pub fn settings(&self) -> &RewriteSettings {
        &self.settings
    }

    /// The prompt training examples are stored under.
    pub fn problem_prompt(&self, problem: &Problem) -> String {
        self.settings.problem_template.render(&problem.statement)
    }

    pub fn retell_prompt(&self, problem: &Problem) -> String {
        self.settings
            .retell_template
            .render(&problem.statement, &problem.expert_solution)
    }

    /// Samples on the bare problem prompt and keeps one correct candidate.
    pub async fn self_align(&self, problem: &Problem, rng: &mut ChaCha8Rng) -> Result<Option<Selection>, PolicyError> {
        let prompt = self.problem_prompt(problem);
        let candidates = self
            .client
            .sample(&problem.id, &prompt, &self.settings.sampling)
            .await?;
        Ok(self.select(problem, prompt, &candidates, Provenance::SelfAlign, rng))
    }

    /// Samples on the retell prompt and keeps one correct candidate. The kept
    /// example is stored under the bare problem prompt, never the retell
    /// prompt, so training does not condition on the reference solution.
    pub async fn guided_align(
        &self,
        problem: &Problem,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Selection>, PolicyError> {
        let retell = self.retell_prompt(problem);
        let candidates = self
            .client
            .sample(&problem.id, &retell, &self.settings.sampling)
            .await?;
        let prompt = self.problem_prompt(problem);
        Ok(self.select(problem, prompt, &candidates, Provenance::Retell, rng))
    }

    fn select(
        &self,
        problem: &Problem,
        prompt: String,
        candidates: &[Candidate],
        provenance: Provenance,
        rng: &mut ChaCha8Rng,
    ) -> Option<Selection> {
        let correct: Vec<&Candidate> = candidates
            .iter()
            .filter(|c| c.finish_reason == FinishReason::Stop)
            .filter(|c| self.verifier.verify(&c.text, &problem.gold_answer))
            .collect();
        if correct.is_empty() {
            return None;
        }
        let draw = rng.gen_range(0..correct.len());
        let chosen = correct[draw];
        let token_count = if chosen.token_logprobs.is_empty() {
            chosen.text.split_whitespace().count()
        } else {
            chosen.token_logprobs.len()
        };
        Some(Selection {
            example: RewrittenExample {
                problem_id: problem.id.clone(),
                prompt,
                response: chosen.text.clone(),
                provenance,
                num_candidates_sampled: candidates.len(),
                num_correct: correct.len(),
                selected_index: Some(chosen.index),
                response_token_count: token_count.max(1),
                error: None,
            },
            rng_draw: draw as u64,
        })
    }

    /// Runs the full hierarchy for one problem. Endpoint failures never
    /// escape: they route the problem to the expert fallback with the error
    /// recorded.
    pub async fn rewrite_problem(&self, problem: &Problem) -> LedgerEntry {
        let k = self.settings.sampling.num_samples;
        let mut self_rng = selection_rng(self.settings.seed, Provenance::SelfAlign, &problem.id);
        let self_err = match self.self_align(problem, &mut self_rng).await {
            Ok(Some(sel)) => {
                return LedgerEntry {
                    outcome: StageOutcome {
                        problem_id: problem.id.clone(),
                        stage_reached: Provenance::SelfAlign,
                        self_correct_count: sel.example.num_correct,
                        retell_correct_count: 0,
                        rng_draw: Some(sel.rng_draw),
                        endpoint_error: false,
                    },
                    example: sel.example,
                }
            }
            Ok(None) => None,
            Err(e) => Some(e),
        };
        if let Some(err) = self_err {
            log::warn!("problem `{}`: self-alignment failed: {err}", problem.id);
            return self.fallback(problem, k, Some(err.to_string())).await;
        }

        let mut retell_rng = selection_rng(self.settings.seed, Provenance::Retell, &problem.id);
        match self.guided_align(problem, &mut retell_rng).await {
            Ok(Some(sel)) => LedgerEntry {
                outcome: StageOutcome {
                    problem_id: problem.id.clone(),
                    stage_reached: Provenance::Retell,
                    self_correct_count: 0,
                    retell_correct_count: sel.example.num_correct,
                    rng_draw: Some(sel.rng_draw),
                    endpoint_error: false,
                },
                example: sel.example,
            },
            Ok(None) => self.fallback(problem, 2 * k, None).await,
            Err(err) => {
                log::warn!("problem `{}`: guided alignment failed: {err}", problem.id);
                self.fallback(problem, 2 * k, Some(err.to_string())).await
            }
        }
    }

    async fn fallback(&self, problem: &Problem, sampled: usize, error: Option<String>) -> LedgerEntry {
        let prompt = self.problem_prompt(problem);
        // endpoint token count when scoring is available, word count otherwise
        let token_count = match self.client.score_logprobs(&prompt, &problem.expert_solution).await {
            Ok(lp) if !lp.is_empty() => lp.len(),
            Ok(_) => problem.expert_solution.split_whitespace().count(),
            Err(e) => {
                log::debug!("problem `{}`: cannot score expert solution: {e}", problem.id);
                problem.expert_solution.split_whitespace().count()
            }
        };
        LedgerEntry {
            outcome: StageOutcome {
                problem_id: problem.id.clone(),
                stage_reached: Provenance::Expert,
                self_correct_count: 0,
                retell_correct_count: 0,
                rng_draw: None,
                endpoint_error: error.is_some(),
            },
            example: RewrittenExample {
                problem_id: problem.id.clone(),
                prompt,
                response: problem.expert_solution.clone(),
                provenance: Provenance::Expert,
                num_candidates_sampled: sampled,
                num_correct: 0,
                selected_index: None,
                response_token_count: token_count.max(1),
                error,
            },
        }
    }

    /// Rewrites a whole corpus. Problems already in the checkpoint ledger are
    /// not sampled again; the finished dataset is in corpus order.
    pub async fn rewrite_corpus(
        &self,
        problems: &[Problem],
        header: MixtureHeader,
        options: RunOptions<'_>,
    ) -> Result<RewriteRun, RewriteError> {
        let mut ids = HashSet::with_capacity(problems.len());
        for p in problems {
            if !ids.insert(p.id.as_str()) {
                return Err(RewriteError::Input(format!("duplicate problem id `{}`", p.id)));
            }
        }

        let mut done: HashMap<String, LedgerEntry> = HashMap::new();
        let mut ledger = match options.checkpoint {
            Some(path) => {
                let (ledger, entries) = Ledger::open(path, &header.config_digest)?;
                for entry in entries {
                    if !ids.contains(entry.outcome.problem_id.as_str()) {
                        return Err(RewriteError::Checkpoint(format!(
                            "ledger has problem `{}` which is not in the corpus",
                            entry.outcome.problem_id
                        )));
                    }
                    done.insert(entry.outcome.problem_id.clone(), entry);
                }
                Some(ledger)
            }
            None => None,
        };
        if !done.is_empty() {
            log::info!("resuming: {} of {} problems already done", done.len(), problems.len());
        }

        let pending: Vec<&Problem> = problems.iter().filter(|p| !done.contains_key(&p.id)).collect();
        let budget = options.halt_after.unwrap_or(usize::MAX).min(pending.len());
        let concurrency = self.client.limits().max_in_flight.max(1);
        let mut results = stream::iter(pending[..budget].iter().copied())
            .map(|p| self.rewrite_problem(p))
            .buffered(concurrency);
        while let Some(entry) = results.next().await {
            if let Some(ledger) = ledger.as_mut() {
                ledger.append(&entry)?;
            }
            done.insert(entry.outcome.problem_id.clone(), entry);
        }

        if done.len() < problems.len() {
            return Ok(RewriteRun::Partial {
                completed: done.len(),
                remaining: problems.len() - done.len(),
            });
        }
        let mut examples = Vec::with_capacity(problems.len());
        let mut outcomes = Vec::with_capacity(problems.len());
        for p in problems {
            let entry = done.remove(&p.id).expect("every problem is done");
            outcomes.push(entry.outcome);
            examples.push(entry.example);
        }
        let dataset = MixtureDataset::new(header, examples);
        dataset
            .validate_against(problems)
            .map_err(|e| RewriteError::Input(e.to_string()))?;
        Ok(RewriteRun::Complete { dataset, outcomes })
    }
}
