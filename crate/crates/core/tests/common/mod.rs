#![allow(dead_code)]

use std::sync::Arc;

use policy_align::corpus::{MixtureHeader, Problem, Provenance, MIXTURE_SCHEMA_VERSION};
use policy_align::policy::mock::{MockFixture, ScriptedBackend, ScriptedResponse};
use policy_align::policy::{ClientLimits, PolicyBackend, PolicyClient, RetryPolicy, SamplingConfig};
use policy_align::rewriter::{ProblemPromptTemplate, RetellPromptTemplate, RewriteSettings, Rewriter};
use policy_align::verifier::Verifier;

pub fn problem(i: usize) -> Problem {
    Problem {
        id: format!("p{i:05}"),
        statement: format!("What is {i} plus one?"),
        expert_solution: format!("Adding one to {i} gives {}. The answer is \\boxed{{{}}}.", i + 1, i + 1),
        gold_answer: (i + 1).to_string(),
    }
}

pub fn correct(p: &Problem, variant: usize) -> ScriptedResponse {
    ScriptedResponse::text(format!(
        "Counting up from the start (variant {variant}) we reach \\boxed{{{}}}",
        p.gold_answer
    ))
}

pub fn wrong(p: &Problem, variant: usize) -> ScriptedResponse {
    ScriptedResponse::text(format!(
        "A guess (variant {variant}) gives \\boxed{{{}0}}",
        p.gold_answer
    ))
}

pub fn problem_prompt(p: &Problem) -> String {
    ProblemPromptTemplate::default().render(&p.statement)
}

pub fn retell_prompt(p: &Problem) -> String {
    RetellPromptTemplate::builtin().render(&p.statement, &p.expert_solution)
}

/// k responses where the listed slots are correct and the rest wrong.
pub fn responses(p: &Problem, k: usize, correct_slots: &[usize]) -> Vec<ScriptedResponse> {
    (0..k)
        .map(|i| {
            if correct_slots.contains(&i) {
                correct(p, i)
            } else {
                wrong(p, i)
            }
        })
        .collect()
}

/// Scripts `p` so the rewrite ends in `verdict`. `slot` picks the correct
/// candidate position in the deciding stage.
pub fn script_verdict(fixture: &mut MockFixture, p: &Problem, verdict: Provenance, k: usize, slot: usize) {
    let all_wrong = vec![wrong(p, 0)];
    match verdict {
        Provenance::SelfAlign => {
            fixture.script(&problem_prompt(p), responses(p, k, &[slot % k]));
        }
        Provenance::Retell => {
            fixture.script(&problem_prompt(p), all_wrong);
            fixture.script(&retell_prompt(p), responses(p, k, &[slot % k]));
        }
        Provenance::Expert => {
            fixture.script(&problem_prompt(p), all_wrong.clone());
            fixture.script(&retell_prompt(p), all_wrong);
        }
    }
}

pub fn limits(max_in_flight: usize) -> ClientLimits {
    ClientLimits {
        max_in_flight,
        retry: RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 1,
            backoff_cap_ms: 4,
        },
        timeout: None,
    }
}

pub fn settings(k: usize, seed: u64) -> RewriteSettings {
    RewriteSettings {
        sampling: SamplingConfig {
            num_samples: k,
            seed,
            ..SamplingConfig::default()
        },
        seed,
        problem_template: ProblemPromptTemplate::default(),
        retell_template: RetellPromptTemplate::builtin(),
    }
}

pub fn rewriter_over(backend: Arc<dyn PolicyBackend>, k: usize, seed: u64, max_in_flight: usize) -> Rewriter {
    let client = PolicyClient::new(backend, limits(max_in_flight)).unwrap();
    Rewriter::new(client, Verifier::default(), settings(k, seed)).unwrap()
}

pub fn rewriter(fixture: MockFixture, k: usize, seed: u64, max_in_flight: usize) -> Rewriter {
    rewriter_over(Arc::new(ScriptedBackend::new(fixture)), k, seed, max_in_flight)
}

pub fn header(digest: &str) -> MixtureHeader {
    MixtureHeader {
        schema_version: MIXTURE_SCHEMA_VERSION,
        created_at: "2024-01-01T00:00:00Z".into(),
        config_digest: digest.into(),
    }
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap()
}
