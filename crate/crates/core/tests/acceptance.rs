//! Acceptance suite. Runs without the libtest harness and prints one
//! `[PASS]`, `[FAIL]` or `[SKIP]` line per criterion; exits nonzero when any
//! criterion fails.

mod common;

use std::collections::{HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use policy_align::analytics::{self, Aggregation, ReportFormat, ScoreRecord, Source};
use policy_align::corpus::{self, MixtureDataset, Problem, Provenance};
use policy_align::loss::export::export_weights;
use policy_align::loss::gradcheck::{grad_check, seeded_fixture, WeightHandling, DEFAULT_EPSILON};
use policy_align::loss::{ce_loss, dft_loss, is_weighted_loss, weighted_loss, Objective};
use policy_align::policy::mock::{CallKind, InstrumentedBackend, MockFixture, ScriptedBackend, ScriptedResponse};
use policy_align::policy::{ClientLimits, ClientPolicy, PolicyClient, RetryPolicy, SamplingConfig};
use policy_align::rewriter::{RewriteRun, Rewriter, RunOptions};
use policy_align::verifier::{load_verifier_corpus, run_verifier_corpus, Verifier};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Status {
    Pass,
    Fail,
    Skip,
}

type Criterion = fn() -> Outcome;

struct Outcome {
    status: Status,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome {
        status: Status::Pass,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        status: Status::Fail,
        detail: detail.into(),
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

/// NaN is never within tolerance.
fn within(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn paused_runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_time()
        .start_paused(true)
        .build()
        .unwrap()
}

fn encode(ds: &MixtureDataset) -> Vec<u8> {
    let mut out = Vec::new();
    corpus::encode_mixture(ds, &mut out).unwrap();
    out
}

async fn complete(rw: &Rewriter, problems: &[Problem], options: RunOptions<'_>) -> Result<MixtureDataset, String> {
    match rw.rewrite_corpus(problems, header("acceptance"), options).await {
        Ok(RewriteRun::Complete { dataset, .. }) => Ok(dataset),
        Ok(other) => Err(format!("run did not complete: {other:?}")),
        Err(e) => Err(e.to_string()),
    }
}

fn shuffled_verdicts(counts: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<Provenance> {
    let mut v = Vec::with_capacity(counts.iter().sum());
    for (p, n) in Provenance::ALL.into_iter().zip(counts) {
        v.extend(std::iter::repeat_n(p, n));
    }
    v.shuffle(rng);
    v
}

// 1 -------------------------------------------------------------------------

fn routing_run(label: &str, counts: [usize; 3], seed: u64) -> Result<String, String> {
    const K: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let verdicts = shuffled_verdicts(counts, &mut rng);
    let problems: Vec<Problem> = (0..verdicts.len()).map(problem).collect();

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus_path = dir.path().join("corpus.jsonl");
    corpus::write_corpus(&problems, &corpus_path).map_err(|e| e.to_string())?;

    let started = Instant::now();
    let ingested = corpus::ingest_corpus(&corpus_path, 8192).map_err(|e| e.to_string())?;
    if ingested.problems.len() != problems.len() {
        return Err(format!("ingest kept {} of {}", ingested.problems.len(), problems.len()));
    }
    let mut fixture = MockFixture::default();
    for (p, &v) in ingested.problems.iter().zip(&verdicts) {
        script_verdict(&mut fixture, p, v, K, rng.gen_range(0..K));
    }
    let rw = rewriter(fixture, K, seed, 64);
    let ds = runtime().block_on(complete(&rw, &ingested.problems, RunOptions::default()))?;
    let elapsed = started.elapsed();

    let got = [ds.stats.self_align, ds.stats.retell, ds.stats.expert];
    let routed_as_scripted = ds.examples.iter().zip(&verdicts).all(|(e, &v)| e.provenance == v);
    let detail = format!(
        "{label}: {} / {} / {} of {} in {:.1}s",
        got[0],
        got[1],
        got[2],
        ds.stats.total,
        elapsed.as_secs_f64()
    );
    if got == counts && ds.stats.total == problems.len() && routed_as_scripted && elapsed < Duration::from_secs(300) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_routing() -> Outcome {
    let runs = [
        routing_run("Qwen2.5-Math-7B", [28_752, 11_620, 7_634], 1),
        routing_run("Llama-3.1-8B-Instruct", [26_947, 16_335, 4_719], 2),
    ];
    let ok = runs.iter().all(Result::is_ok);
    let detail = runs
        .iter()
        .map(|r| match r {
            Ok(s) | Err(s) => s.clone(),
        })
        .collect::<Vec<_>>()
        .join("; ");
    check(ok, detail)
}

// 2 -------------------------------------------------------------------------

fn randomize_failures(fixture: &mut MockFixture, rng: &mut ChaCha8Rng, max_fail: u32) {
    for script in fixture.prompts.values_mut() {
        for r in &mut script.responses {
            r.fail_attempts = rng.gen_range(0..=max_fail);
            r.delay_ms = rng.gen_range(0..=5);
        }
    }
}

fn criterion_partition() -> Outcome {
    const CORPORA: u64 = 1_000;
    let rt = paused_runtime();
    let mut total_problems = 0;
    for case in 0..CORPORA {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + case);
        let n = rng.gen_range(1..=24);
        let k = rng.gen_range(1..=5);
        let offset = rng.gen_range(0..1_000);
        let problems: Vec<Problem> = (offset..offset + n).map(problem).collect();
        let verdicts: Vec<Provenance> = (0..n).map(|_| *Provenance::ALL.choose(&mut rng).unwrap()).collect();
        let mut fixture = MockFixture::default();
        for (p, &v) in problems.iter().zip(&verdicts) {
            let slot = rng.gen_range(0..k);
            script_verdict(&mut fixture, p, v, k, slot);
        }
        randomize_failures(&mut fixture, &mut rng, 2);

        let seed = rng.gen();
        let first = rewriter(fixture.clone(), k, seed, rng.gen_range(1..=8));
        let second = rewriter(fixture, k, seed, rng.gen_range(1..=8));
        let a = match rt.block_on(complete(&first, &problems, RunOptions::default())) {
            Ok(ds) => ds,
            Err(e) => return fail(format!("corpus {case}: {e}")),
        };
        let b = match rt.block_on(complete(&second, &problems, RunOptions::default())) {
            Ok(ds) => ds,
            Err(e) => return fail(format!("corpus {case}: {e}")),
        };

        let ids: HashSet<&str> = a.examples.iter().map(|e| e.problem_id.as_str()).collect();
        let partitioned = ids.len() == n
            && a.examples.len() == n
            && problems.iter().all(|p| ids.contains(p.id.as_str()))
            && a.stats.self_align + a.stats.retell + a.stats.expert == n
            && a.stats.total == n;
        if !partitioned {
            return fail(format!("corpus {case}: partition violated ({:?})", a.stats));
        }
        if a.examples.iter().zip(&verdicts).any(|(e, &v)| e.provenance != v) {
            return fail(format!("corpus {case}: a problem left its scripted class"));
        }
        if encode(&a) != encode(&b) {
            return fail(format!("corpus {case}: reruns differ"));
        }
        total_problems += n;
    }
    pass(format!(
        "{CORPORA} corpora ({total_problems} problems): partition exact, stats sum, reruns byte-identical"
    ))
}

// 3 -------------------------------------------------------------------------

fn criterion_gradients() -> Outcome {
    const FIXTURES: u64 = 100;
    let mut worst = [0.0f64; 3];
    let mut control_max = 0.0f64;
    let mut control_hits = 0;
    for seed in 0..FIXTURES {
        let (model, batch) = seeded_fixture(seed);
        for (slot, objective) in [Objective::Ce, Objective::Dft, Objective::Is].into_iter().enumerate() {
            match grad_check(&model, &batch, objective, DEFAULT_EPSILON, WeightHandling::Frozen) {
                Ok(r) => worst[slot] = worst[slot].max(r.max_rel_err),
                Err(e) => return fail(format!("fixture {seed} {objective:?}: {e}")),
            }
        }
        match grad_check(
            &model,
            &batch,
            Objective::Dft,
            DEFAULT_EPSILON,
            WeightHandling::Recomputed,
        ) {
            Ok(r) => {
                control_max = control_max.max(r.max_rel_err);
                if r.max_rel_err > 1e-2 {
                    control_hits += 1;
                }
            }
            Err(e) => return fail(format!("fixture {seed} control: {e}")),
        }
    }
    let ok = worst.iter().all(|&w| w < 1e-5) && control_hits >= 1;
    check(
        ok,
        format!(
            "max rel err CE {:.2e}, DFT {:.2e}, IS {:.2e} (< 1e-5); unfrozen control exceeds 1e-2 on {control_hits}/{FIXTURES} (max {:.2e})",
            worst[0], worst[1], worst[2], control_max
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn criterion_identities() -> Outcome {
    let ce = ce_loss(&[0.5, 0.25]).unwrap();
    let dft = dft_loss(&[0.5, 0.25]).unwrap();
    // -ln 0.5 - ln 0.25 = 3 ln 2; -(0.5 ln 0.5 + 0.25 ln 0.25) = ln 2
    let ln2 = std::f64::consts::LN_2;
    if (ce - 3.0 * ln2).abs() > 1e-9 || (dft - ln2).abs() > 1e-9 {
        return fail(format!("[0.5, 0.25] gave CE {ce}, DFT {dft}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    const CASES: usize = 10_000;
    for case in 0..CASES {
        let len = rng.gen_range(1..=64);
        let mut probs: Vec<f64> = (0..len).map(|_| rng.gen_range(1e-6..=1.0)).collect();
        if case % 10 == 0 {
            probs.iter_mut().for_each(|p| *p = 1.0);
        }
        let ce = ce_loss(&probs).unwrap();
        let ones = weighted_loss(&probs, &vec![1.0; len]).unwrap();
        let (self_mix, _) = is_weighted_loss(&probs, Some(&probs)).unwrap();
        if ones.to_bits() != ce.to_bits() || self_mix.to_bits() != ce.to_bits() {
            return fail(format!(
                "case {case}: w=1 loss {ones:e} / {self_mix:e} differs from CE {ce:e}"
            ));
        }
        let dft = dft_loss(&probs).unwrap();
        let strict = probs.iter().any(|&p| p < 1.0);
        if dft > ce || (strict && dft >= ce) {
            return fail(format!("case {case}: DFT {dft:e} vs CE {ce:e}"));
        }
    }
    pass(format!(
        "CE {ce:.10} DFT {dft:.10}; {CASES} random cases: w=1 bitwise equal to CE, DFT <= CE (strict when p < 1)"
    ))
}

// 5 -------------------------------------------------------------------------

const FRAGMENTS: &[&str] = &[
    "\\boxed{",
    "}",
    "{",
    "\\frac",
    "\\dfrac",
    "\\sqrt",
    "1",
    "2",
    "07",
    "-",
    "+",
    "/",
    ".",
    ",",
    "^",
    "_",
    "$",
    "\\$",
    "\\left(",
    "\\right)",
    "(",
    ")",
    "\\pi",
    "x",
    "=",
    " ",
    "\\text{",
    "The answer is",
    "\\%",
    "%",
    "\\infty",
    "\\,",
    "\\!",
    "e",
    "9999999999999999999",
    "\\cdot",
    "\\",
    "\u{2212}",
    "\u{b0}",
    "∞",
    "\n",
];

fn fuzz_string(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.5) {
        let len = rng.gen_range(0..=256);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    } else {
        (0..rng.gen_range(0..=40))
            .map(|_| *FRAGMENTS.choose(rng).unwrap())
            .collect()
    }
}

fn criterion_verifier() -> Outcome {
    let path = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/verifier_corpus.tsv"));
    let cases = match load_verifier_corpus(path) {
        Ok(c) => c,
        Err(e) => return fail(e.to_string()),
    };
    let verifier = Verifier::default();
    let outcome = run_verifier_corpus(&verifier, &cases);

    const FUZZ: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut panics = 0;
    let mut accepted = 0;
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for _ in 0..FUZZ {
        let response = fuzz_string(&mut rng);
        let gold = fuzz_string(&mut rng);
        match catch_unwind(AssertUnwindSafe(|| verifier.verify(&response, &gold))) {
            Ok(true) => accepted += 1,
            Ok(false) => {}
            Err(_) => panics += 1,
        }
    }
    std::panic::set_hook(hook);

    check(
        cases.len() >= 200 && outcome.all_agree() && panics == 0,
        format!(
            "{} curated cases, {} disagreements; {FUZZ} fuzz inputs, {panics} panics ({accepted} accepted)",
            cases.len(),
            outcome.disagreements.len()
        ),
    )
}

// 6 -------------------------------------------------------------------------

/// Per-problem sequence sums for the SFT demonstration and the rewritten
/// response, chosen so every cell's mean is the Qwen2.5-Math-7B row of the
/// average log-probability table.
const GAP_TARGETS: [(Provenance, f64, Option<f64>); 5] = [
    (Provenance::SelfAlign, -184.44 - 7.25, Some(-83.36 + 3.5)),
    (Provenance::SelfAlign, -184.44 + 7.25, Some(-83.36 - 3.5)),
    (Provenance::Retell, -280.64 + 11.0, Some(-259.44 - 0.75)),
    (Provenance::Retell, -280.64 - 11.0, Some(-259.44 + 0.75)),
    (Provenance::Expert, -296.03, None),
];

const TABLE_ROW: [(Provenance, Source, f64); 5] = [
    (Provenance::SelfAlign, Source::OriginalSft, -184.44),
    (Provenance::SelfAlign, Source::Rewritten, -83.36),
    (Provenance::Retell, Source::OriginalSft, -280.64),
    (Provenance::Retell, Source::Rewritten, -259.44),
    (Provenance::Expert, Source::OriginalSft, -296.03),
];

fn spread(sum: f64, text: &str) -> Vec<f64> {
    let n = text.split_whitespace().count();
    vec![sum / n as f64; n]
}

fn criterion_gap_report() -> Outcome {
    const K: usize = 3;
    let problems: Vec<Problem> = (0..GAP_TARGETS.len()).map(|i| problem(100 + i)).collect();
    let mut fixture = MockFixture::default();
    // hand oracle: per-sequence means and per-token means of every cell
    let mut seq: HashMap<(Provenance, Source), Vec<f64>> = HashMap::new();
    let mut tok: HashMap<(Provenance, Source), Vec<f64>> = HashMap::new();
    for (p, &(v, sft, rewritten)) in problems.iter().zip(&GAP_TARGETS) {
        script_verdict(&mut fixture, p, v, K, 1);
        let prompt = problem_prompt(p);
        fixture.set_score(&prompt, &p.expert_solution, spread(sft, &p.expert_solution));
        seq.entry((v, Source::OriginalSft)).or_default().push(sft);
        tok.entry((v, Source::OriginalSft))
            .or_default()
            .push(sft / p.expert_solution.split_whitespace().count() as f64);
        if let Some(r) = rewritten {
            let text = correct(p, 1).text;
            fixture.set_score(&prompt, &text, spread(r, &text));
            seq.entry((v, Source::Rewritten)).or_default().push(r);
            tok.entry((v, Source::Rewritten))
                .or_default()
                .push(r / text.split_whitespace().count() as f64);
        }
    }
    let mean = |xs: &Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;

    let rt = runtime();
    let ds = match rt.block_on(complete(
        &rewriter(fixture.clone(), K, 6, 4),
        &problems,
        RunOptions::default(),
    )) {
        Ok(ds) => ds,
        Err(e) => return fail(e),
    };
    let client = PolicyClient::new(Arc::new(ScriptedBackend::new(fixture)), limits(4)).unwrap();

    let mut worst = 0.0f64;
    let mut problems_found = Vec::new();
    for (aggregation, oracle) in [(Aggregation::PerSequenceSum, &seq), (Aggregation::PerToken, &tok)] {
        let (report, scores) = match rt.block_on(analytics::gap_report(&ds, &problems, &client, aggregation)) {
            Ok(r) => r,
            Err(e) => return fail(e.to_string()),
        };
        let shape: Vec<(Provenance, Source)> = report.rows.iter().map(|r| (r.subset, r.source)).collect();
        let expected_shape: Vec<(Provenance, Source)> = TABLE_ROW.iter().map(|&(p, s, _)| (p, s)).collect();
        if shape != expected_shape {
            problems_found.push(format!("{aggregation:?}: cells {shape:?}"));
        }
        let sizes: Vec<usize> = report.rows.iter().map(|r| r.num_examples).collect();
        if sizes != [2, 2, 2, 2, 1] {
            problems_found.push(format!("{aggregation:?}: cell sizes {sizes:?}"));
        }
        for row in &report.rows {
            let want = mean(&oracle[&(row.subset, row.source)]);
            let got = row.avg_logprob.unwrap_or(f64::NAN);
            let err = (got - want).abs();
            worst = worst.max(err);
            if !within(got, want, 1e-9) {
                problems_found.push(format!(
                    "{aggregation:?} {:?}/{:?}: {got} vs {want}",
                    row.subset, row.source
                ));
            }
        }
        if aggregation == Aggregation::PerSequenceSum {
            for (row, &(_, _, published)) in report.rows.iter().zip(&TABLE_ROW) {
                let got = row.avg_logprob.unwrap_or(f64::NAN);
                if !within(got, published, 1e-9) {
                    problems_found.push(format!("published cell {published} came out {got}"));
                }
            }
            let f = &report.flags;
            if (f.gap_closed_self_align, f.gap_closed_retell, f.difficulty_ordering)
                != (Some(true), Some(true), Some(true))
            {
                problems_found.push(format!("ordering flags {f:?}"));
            }
        }
        if let Err(e) = recompute_matches(&report, &scores) {
            problems_found.push(e);
        }
    }
    check(
        problems_found.is_empty(),
        if problems_found.is_empty() {
            format!("5 cells (2+2+2+2+1 responses) match hand means within 1e-9 (worst {worst:.1e}); published row reproduced; rerender round-trips")
        } else {
            problems_found.join("; ")
        },
    )
}

/// The report recomputed from saved scores, and parsed back from its line
/// rendering, matches the original.
fn recompute_matches(report: &analytics::GapReport, scores: &[ScoreRecord]) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("scores.jsonl");
    analytics::write_scores(scores, &report.config_digest, &path).map_err(|e| e.to_string())?;
    let (digest, reread) = analytics::read_scores(&path).map_err(|e| e.to_string())?;
    let again = analytics::aggregate(&reread, report.aggregation, &digest);
    let text = analytics::render_report(report, ReportFormat::LineRecords).map_err(|e| e.to_string())?;
    let parsed = analytics::parse_report_records(&text).map_err(|e| e.to_string())?;
    for other in [&again, &parsed] {
        if other.rows.len() != report.rows.len() {
            return Err("recomputed report has a different shape".into());
        }
        for (a, b) in other.rows.iter().zip(&report.rows) {
            let (x, y) = (a.avg_logprob.unwrap_or(f64::NAN), b.avg_logprob.unwrap_or(f64::NAN));
            if !within(x, y, 1e-9) {
                return Err(format!("recomputed cell {x} vs {y}"));
            }
        }
    }
    Ok(())
}

// 7 -------------------------------------------------------------------------

fn criterion_resume() -> Outcome {
    const N: usize = 100;
    const K: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let problems: Vec<Problem> = (0..N).map(problem).collect();
    let mut fixture = MockFixture::default();
    for p in &problems {
        let v = *Provenance::ALL.choose(&mut rng).unwrap();
        script_verdict(&mut fixture, p, v, K, rng.gen_range(0..K));
    }
    let rt = runtime();
    let reference = match rt.block_on(complete(
        &rewriter(fixture.clone(), K, 77, 8),
        &problems,
        RunOptions::default(),
    )) {
        Ok(ds) => encode(&ds),
        Err(e) => return fail(e),
    };

    let sampled = |inst: &InstrumentedBackend| -> HashSet<String> {
        problems
            .iter()
            .filter(|p| inst.generate_calls_for(&problem_prompt(p)) + inst.generate_calls_for(&retell_prompt(p)) > 0)
            .map(|p| p.id.clone())
            .collect()
    };

    for halt in 1..N {
        let dir = tempfile::tempdir().unwrap();
        let ledger = dir.path().join("rewrite.ledger.jsonl");

        let first = Arc::new(InstrumentedBackend::new(Arc::new(ScriptedBackend::new(
            fixture.clone(),
        ))));
        let options = RunOptions {
            checkpoint: Some(&ledger),
            halt_after: Some(halt),
        };
        match rt.block_on(rewriter_over(first.clone(), K, 77, 8).rewrite_corpus(
            &problems,
            header("acceptance"),
            options,
        )) {
            Ok(RewriteRun::Partial { completed, .. }) if completed == halt => {}
            other => return fail(format!("halt after {halt}: {other:?}")),
        }

        let second = Arc::new(InstrumentedBackend::new(Arc::new(ScriptedBackend::new(
            fixture.clone(),
        ))));
        let options = RunOptions {
            checkpoint: Some(&ledger),
            halt_after: None,
        };
        let resumed = match rt.block_on(complete(&rewriter_over(second.clone(), K, 77, 8), &problems, options)) {
            Ok(ds) => encode(&ds),
            Err(e) => return fail(format!("resume after {halt}: {e}")),
        };
        if resumed != reference {
            return fail(format!(
                "resume after {halt}: dataset differs from the uninterrupted run"
            ));
        }
        let (a, b) = (sampled(&first), sampled(&second));
        if a.len() != halt || a.len() + b.len() != N || !a.is_disjoint(&b) {
            return fail(format!(
                "resume after {halt}: {} + {} problems sampled, {} in both",
                a.len(),
                b.len(),
                a.intersection(&b).count()
            ));
        }
    }
    pass(format!(
        "interrupted after each of 1..{} problems: {} resumes identical, no problem resampled",
        N - 1,
        N - 1
    ))
}

// 8 -------------------------------------------------------------------------

fn criterion_concurrency() -> Outcome {
    const SCHEDULES: u64 = 10_000;
    let rt = paused_runtime();
    let mut saturated = 0;
    let mut total_calls = 0;
    for case in 0..SCHEDULES {
        let mut rng = ChaCha8Rng::seed_from_u64(80_000 + case);
        let max_in_flight = rng.gen_range(1..=6);
        let max_attempts = rng.gen_range(1..=4);
        let limits = ClientLimits {
            max_in_flight,
            retry: RetryPolicy {
                max_attempts,
                backoff_base_ms: rng.gen_range(0..=8),
                backoff_cap_ms: 16,
            },
            timeout: rng.gen_bool(0.3).then(|| Duration::from_millis(rng.gen_range(5..=40))),
        };
        let prompts: Vec<String> = (0..rng.gen_range(1..=4))
            .map(|i| format!("prompt {case}-{i}"))
            .collect();
        let mut fixture = MockFixture::default();
        for prompt in &prompts {
            let responses = (0..rng.gen_range(1..=6))
                .map(|j| ScriptedResponse {
                    fail_attempts: rng.gen_range(0..=5),
                    permanent_failure: rng.gen_bool(0.1),
                    delay_ms: rng.gen_range(0..=30),
                    ..ScriptedResponse::text(format!("answer {j} is \\boxed{{{j}}}"))
                })
                .collect();
            fixture.script(prompt, responses);
        }
        let inst = Arc::new(InstrumentedBackend::new(Arc::new(ScriptedBackend::new(fixture))));
        let client = PolicyClient::new(inst.clone(), limits).unwrap();
        let cfg = SamplingConfig {
            num_samples: rng.gen_range(1..=8),
            seed: case,
            ..SamplingConfig::default()
        };
        let candidates = rt.block_on(async {
            let sampling = futures::future::join_all(prompts.iter().map(|p| client.sample(p, p, &cfg)));
            let scoring = futures::future::join_all(prompts.iter().map(|p| client.score_logprobs(p, "some text")));
            let (sampled, _) = futures::join!(sampling, scoring);
            sampled
        });

        let peak = inst.peak_in_flight();
        if peak > max_in_flight {
            return fail(format!("schedule {case}: {peak} in flight with limit {max_in_flight}"));
        }
        if peak == max_in_flight {
            saturated += 1;
        }
        let calls = inst.calls();
        total_calls += calls.len();
        let mut per_request: HashMap<(String, usize), u32> = HashMap::new();
        for c in calls.iter().filter(|c| c.kind == CallKind::Generate) {
            if c.attempt > max_attempts {
                return fail(format!(
                    "schedule {case}: attempt {} over budget {max_attempts}",
                    c.attempt
                ));
            }
            *per_request
                .entry((c.prompt_hash.clone(), c.candidate_index))
                .or_default() += 1;
        }
        if let Some(n) = per_request.values().find(|&&n| n > max_attempts) {
            return fail(format!(
                "schedule {case}: {n} calls for one request, budget {max_attempts}"
            ));
        }
        for batch in candidates.into_iter().flatten() {
            if batch.iter().any(|c| c.attempts > max_attempts) {
                return fail(format!("schedule {case}: candidate reported too many attempts"));
            }
        }
    }
    pass(format!(
        "{SCHEDULES} schedules, {total_calls} backend calls: in-flight and attempts within limits (limit reached in {saturated})"
    ))
}

// 9 -------------------------------------------------------------------------

fn criterion_live() -> Outcome {
    let (Ok(endpoint), Ok(model)) = (
        std::env::var("POLICY_ALIGN_LIVE_ENDPOINT"),
        std::env::var("POLICY_ALIGN_LIVE_MODEL"),
    ) else {
        return Outcome {
            status: Status::Skip,
            detail: "set POLICY_ALIGN_LIVE_ENDPOINT and POLICY_ALIGN_LIVE_MODEL to run against a real endpoint".into(),
        };
    };
    let policy = ClientPolicy {
        endpoint_url: endpoint,
        model,
        api_key_env: std::env::var("POLICY_ALIGN_LIVE_KEY_ENV").unwrap_or_else(|_| "OPENAI_API_KEY".into()),
        ..ClientPolicy::default()
    };
    let client = match PolicyClient::from_policy(&policy) {
        Ok(c) => c,
        Err(e) => return fail(e.to_string()),
    };
    let problems: Vec<Problem> = (0..50)
        .map(|i| {
            let (a, b) = (17 * i + 3, 29 * i + 11);
            Problem {
                id: format!("live{i:02}"),
                statement: format!("Compute {a} + {b}. Put the final answer in \\boxed{{}}."),
                expert_solution: format!(
                    "We add {a} and {b} to get {}. The answer is \\boxed{{{}}}.",
                    a + b,
                    a + b
                ),
                gold_answer: (a + b).to_string(),
            }
        })
        .collect();
    let rw = Rewriter::new(client.clone(), Verifier::default(), settings(4, 0)).unwrap();
    let rt = runtime();
    let result = rt.block_on(async {
        let ds = complete(&rw, &problems, RunOptions::default()).await?;
        let (report, scores) = analytics::gap_report(&ds, &problems, &client, Aggregation::PerSequenceSum)
            .await
            .map_err(|e| e.to_string())?;
        let responses = analytics::response_scores(&scores);
        let (header, records) = export_weights(&ds, &responses).map_err(|e| e.to_string())?;
        Ok::<_, String>((ds, report, header, records))
    });
    match result {
        Ok((ds, report, header, records)) => check(
            records.len() == header.num_tokens,
            format!(
                "stats {}/{}/{}; {} weight records for {} tokens; gap closed: self-align {:?}, retell {:?}",
                ds.stats.self_align,
                ds.stats.retell,
                ds.stats.expert,
                records.len(),
                header.num_tokens,
                report.flags.gap_closed_self_align,
                report.flags.gap_closed_retell
            ),
        ),
        Err(e) => fail(e),
    }
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("1 stage-routing fidelity", criterion_routing),
        ("2 partition and determinism", criterion_partition),
        ("3 stop-gradient semantics", criterion_gradients),
        ("4 objective identities", criterion_identities),
        ("5 verifier corpus and fuzz", criterion_verifier),
        ("6 gap-report arithmetic", criterion_gap_report),
        ("7 resume safety", criterion_resume),
        ("8 concurrency contract", criterion_concurrency),
        ("9 live endpoint smoke", criterion_live),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(run).unwrap_or_else(|_| fail("panicked"));
        let tag = match outcome.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!(
            "[{tag}] {name}: {} ({:.1}s)",
            outcome.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
