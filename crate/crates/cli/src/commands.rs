use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use policy_align::analytics::{self, Aggregation, ReportFormat};
use policy_align::config::{ResolvedConfig, RunConfig};
use policy_align::corpus::{self, MixtureHeader, MIXTURE_SCHEMA_VERSION};
use policy_align::loss::export::write_weights;
use policy_align::loss::gradcheck::{grad_check, seeded_fixture, WeightHandling, PASS_THRESHOLD};
use policy_align::loss::Objective;
use policy_align::policy::PolicyClient;
use policy_align::rewriter::{RewriteRun, RewriteSettings, Rewriter, RunOptions};
use policy_align::verifier::{self, Verifier};
use serde_json::json;

use crate::error::{Category, CliError, EXIT_NEGATIVE};
use crate::{AggregationArg, Cli, Command, GlobalArgs};

pub const MIXTURE_FILE: &str = "mixture.jsonl";
pub const LEDGER_FILE: &str = "rewrite.ledger.jsonl";
pub const FILTERED_CORPUS_FILE: &str = "corpus.filtered.jsonl";
pub const INGEST_REPORT_FILE: &str = "ingest_report.json";
pub const STATS_FILE: &str = "stats.txt";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const WEIGHTS_FILE: &str = "weights.jsonl";

struct Printer {
    quiet: bool,
}

impl Printer {
    fn say(&self, text: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", text.as_ref());
        }
    }
}

pub fn run(cli: Cli) -> Result<u8, CliError> {
    let out = Printer {
        quiet: cli.global.quiet,
    };
    let g = &cli.global;
    match cli.command {
        Command::Ingest { corpus, max_tokens } => {
            let resolved = load_config(g, "ingest", |c| {
                set(&mut c.corpus_path, corpus);
                set(&mut c.max_tokens, max_tokens);
            })?;
            ingest(&resolved, &out)
        }
        Command::Rewrite {
            corpus,
            template,
            k,
            temperature,
            halt_after,
        } => {
            let resolved = load_config(g, "rewrite", |c| {
                set(&mut c.corpus_path, corpus);
                set(&mut c.template, template);
                set(&mut c.sampling.num_samples, k);
                set(&mut c.sampling.temperature, temperature);
            })?;
            rewrite(&resolved, halt_after, &out)
        }
        Command::Verify {
            response_file,
            gold,
            corpus,
        } => verify(response_file, gold, corpus, &out),
        Command::Stats { dataset } => {
            let resolved = optional_config(g, "stats")?;
            let dir = output_dir(g, resolved.as_ref())?;
            stats(&dir, dataset, &out)
        }
        Command::Report {
            dataset,
            corpus,
            aggregation,
        } => {
            let resolved = load_config(g, "report", |c| {
                set(&mut c.corpus_path, corpus);
                if let Some(a) = aggregation {
                    c.aggregation = match a {
                        AggregationArg::Seq => Aggregation::PerSequenceSum,
                        AggregationArg::Token => Aggregation::PerToken,
                    };
                }
            })?;
            report(&resolved, dataset, &out)
        }
        Command::ExportWeights { dataset, scores } => {
            let resolved = match scores {
                Some(_) => optional_config(g, "export-weights")?,
                None => Some(load_config(g, "export-weights", |_| {})?),
            };
            let dir = output_dir(g, resolved.as_ref())?;
            export_weights(&dir, resolved.as_ref(), dataset, scores, &out)
        }
        Command::Gradcheck {
            objective,
            trials,
            epsilon,
        } => gradcheck(objective.into(), trials, epsilon, g.seed.unwrap_or(0), &out),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Loads the config file, applies global and subcommand overrides, and
/// resolves it. Nothing is written here.
fn load_config(
    g: &GlobalArgs,
    command: &str,
    overrides: impl FnOnce(&mut RunConfig),
) -> Result<ResolvedConfig, CliError> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| CliError::config(format!("`{command}` needs --config")))?;
    let mut config = RunConfig::load(path)?;
    set(&mut config.seed, g.seed);
    set(&mut config.output_dir, g.out.clone());
    overrides(&mut config);
    let resolved = config.resolve()?;
    log::info!("config digest {}", resolved.digest);
    log::debug!("resolved config: {}", resolved_json(&resolved));
    Ok(resolved)
}

fn optional_config(g: &GlobalArgs, command: &str) -> Result<Option<ResolvedConfig>, CliError> {
    match g.config {
        Some(_) => load_config(g, command, |_| {}).map(Some),
        None => Ok(None),
    }
}

fn output_dir(g: &GlobalArgs, resolved: Option<&ResolvedConfig>) -> Result<PathBuf, CliError> {
    g.out
        .clone()
        .or_else(|| resolved.map(|r| r.config.output_dir.clone()))
        .ok_or_else(|| CliError::config("no output directory: pass --out or --config"))
}

fn resolved_json(resolved: &ResolvedConfig) -> serde_json::Value {
    json!({
        "config_digest": resolved.digest,
        "retell_template": {
            "name": resolved.retell_template.name,
            "version": resolved.retell_template.version,
        },
        "config": resolved.config,
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes the resolved config next to the outputs of `command`.
fn record_config(dir: &Path, command: &str, resolved: &ResolvedConfig) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&resolved_json(resolved)).expect("config serializes") + "\n";
    write_atomic(&dir.join(format!("{command}.config.json")), |tmp| {
        fs::write(tmp, &text).map_err(|e| CliError::io(tmp, e))
    })
}

/// Runs `write` against a temporary sibling of `path` and renames it into
/// place on success, so a failed write leaves no file behind.
fn write_atomic<T>(path: &Path, write: impl FnOnce(&Path) -> Result<T, CliError>) -> Result<T, CliError> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.partial"));
    match write(&tmp) {
        Ok(v) => {
            fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new(Category::Io, format!("cannot start async runtime: {e}")))
}

fn created_at(config: &RunConfig) -> Result<String, CliError> {
    if let Some(t) = &config.created_at {
        return Ok(t.clone());
    }
    let at = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(raw) => {
            let secs: i64 = raw
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("SOURCE_DATE_EPOCH `{raw}` is not an integer")))?;
            DateTime::<Utc>::from_timestamp(secs, 0)
                .ok_or_else(|| CliError::config(format!("SOURCE_DATE_EPOCH `{raw}` is out of range")))?
        }
        Err(_) => Utc::now(),
    };
    Ok(at.to_rfc3339_opts(SecondsFormat::Secs, true))
}

fn ingest(resolved: &ResolvedConfig, out: &Printer) -> Result<u8, CliError> {
    let cfg = &resolved.config;
    let outcome = corpus::ingest_corpus(&cfg.corpus_path, cfg.max_tokens)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    record_config(dir, "ingest", resolved)?;
    write_atomic(&dir.join(FILTERED_CORPUS_FILE), |tmp| {
        corpus::write_corpus(&outcome.problems, tmp).map_err(CliError::from)
    })?;
    let report = json!({
        "config_digest": resolved.digest,
        "max_tokens": cfg.max_tokens,
        "kept": outcome.report.kept,
        "dropped": outcome.report.dropped,
        "dropped_ids": outcome.report.dropped_ids,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_atomic(&dir.join(INGEST_REPORT_FILE), |tmp| {
        fs::write(tmp, &text).map_err(|e| CliError::io(tmp, e))
    })?;
    out.say(format!(
        "kept {} problems, dropped {} over {} tokens",
        outcome.report.kept, outcome.report.dropped, cfg.max_tokens
    ));
    Ok(0)
}

fn rewrite(resolved: &ResolvedConfig, halt_after: Option<usize>, out: &Printer) -> Result<u8, CliError> {
    let cfg = &resolved.config;
    let problems = corpus::ingest_corpus(&cfg.corpus_path, cfg.max_tokens)?.problems;
    let client = PolicyClient::from_policy(&cfg.endpoint)?;
    let settings = RewriteSettings {
        sampling: cfg.sampling.clone(),
        seed: cfg.seed,
        problem_template: resolved.problem_template.clone(),
        retell_template: resolved.retell_template.clone(),
    };
    let rewriter = Rewriter::new(client, Verifier::default(), settings)?;
    let header = MixtureHeader {
        schema_version: MIXTURE_SCHEMA_VERSION,
        created_at: created_at(cfg)?,
        config_digest: resolved.digest.clone(),
    };

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    record_config(dir, "rewrite", resolved)?;
    let ledger = dir.join(LEDGER_FILE);
    let options = RunOptions {
        checkpoint: Some(&ledger),
        halt_after,
    };
    let run = runtime()?.block_on(rewriter.rewrite_corpus(&problems, header, options))?;
    match run {
        RewriteRun::Complete { dataset, .. } => {
            let path = dir.join(MIXTURE_FILE);
            write_atomic(&path, |tmp| {
                corpus::write_mixture(&dataset, tmp).map_err(CliError::from)
            })?;
            let s = dataset.stats;
            out.say(format!(
                "wrote {}: self_align {}, retell {}, expert {}, total {}",
                path.display(),
                s.self_align,
                s.retell,
                s.expert,
                s.total
            ));
        }
        RewriteRun::Partial { completed, remaining } => {
            out.say(format!(
                "halted: {completed} problems done, {remaining} remaining; rerun to resume"
            ));
        }
    }
    Ok(0)
}

fn verify(
    response_file: Option<PathBuf>,
    gold: Option<String>,
    corpus: Option<PathBuf>,
    out: &Printer,
) -> Result<u8, CliError> {
    let v = Verifier::default();
    if let Some(path) = corpus {
        let cases = verifier::load_verifier_corpus(&path)?;
        let outcome = verifier::run_verifier_corpus(&v, &cases);
        for case in &outcome.disagreements {
            out.say(format!(
                "line {}: expected {} for gold `{}`",
                case.line, case.expected, case.gold
            ));
        }
        out.say(format!("{}/{} cases agree", outcome.agreed, outcome.total));
        if !outcome.all_agree() {
            return Err(CliError::new(
                Category::VerifierCorpus,
                format!("{} of {} cases disagree", outcome.disagreements.len(), outcome.total),
            ));
        }
        return Ok(0);
    }

    let (Some(path), Some(gold)) = (response_file, gold) else {
        return Err(CliError::config("verify needs --response-file and --gold, or --corpus"));
    };
    let response = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let extracted = v.extract_answer(&response);
    let correct = v.verify(&response, &gold);
    let shown = extracted.map_or_else(|| "<none>".to_string(), |a| a.normalized);
    out.say(format!(
        "{}: extracted `{shown}`",
        if correct { "correct" } else { "incorrect" }
    ));
    Ok(if correct { 0 } else { EXIT_NEGATIVE })
}

fn stats(dir: &Path, dataset: Option<PathBuf>, out: &Printer) -> Result<u8, CliError> {
    let path = dataset.unwrap_or_else(|| dir.join(MIXTURE_FILE));
    let ds = corpus::read_mixture(&path)?;
    let table = analytics::render_stats(&analytics::stats_table(&ds), &ds.header.config_digest);
    create_dir(dir)?;
    write_atomic(&dir.join(STATS_FILE), |tmp| {
        fs::write(tmp, &table).map_err(|e| CliError::io(tmp, e))
    })?;
    out.say(table.trim_end());
    Ok(0)
}

fn report(resolved: &ResolvedConfig, dataset: Option<PathBuf>, out: &Printer) -> Result<u8, CliError> {
    let cfg = &resolved.config;
    let dir = &cfg.output_dir;
    let ds = corpus::read_mixture(&dataset.unwrap_or_else(|| dir.join(MIXTURE_FILE)))?;
    let problems = corpus::ingest_corpus(&cfg.corpus_path, usize::MAX)?.problems;
    let client = PolicyClient::from_policy(&cfg.endpoint)?;
    let scores = runtime()?.block_on(analytics::score_dataset(&ds, &problems, &client))?;
    let gap = analytics::aggregate(&scores, cfg.aggregation, &resolved.digest);
    // Render everything first so a refused report writes nothing.
    let rendered = ReportFormat::ALL
        .iter()
        .map(|&f| analytics::render_report(&gap, f).map(|text| (f, text)))
        .collect::<Result<Vec<_>, _>>()?;

    create_dir(dir)?;
    record_config(dir, "report", resolved)?;
    write_atomic(&dir.join(SCORES_FILE), |tmp| {
        analytics::write_scores(&scores, &resolved.digest, tmp).map_err(CliError::from)
    })?;
    for (format, text) in &rendered {
        write_atomic(&dir.join(format.file_name()), |tmp| {
            fs::write(tmp, text).map_err(|e| CliError::io(tmp, e))
        })?;
    }
    let table = &rendered[0].1;
    out.say(table.trim_end());
    Ok(0)
}

fn export_weights(
    dir: &Path,
    resolved: Option<&ResolvedConfig>,
    dataset: Option<PathBuf>,
    scores: Option<PathBuf>,
    out: &Printer,
) -> Result<u8, CliError> {
    let ds = corpus::read_mixture(&dataset.unwrap_or_else(|| dir.join(MIXTURE_FILE)))?;
    let by_problem = match (scores, resolved) {
        (Some(path), _) => analytics::response_scores(&analytics::read_scores(&path)?.1),
        (None, Some(r)) => {
            let client = PolicyClient::from_policy(&r.config.endpoint)?;
            runtime()?.block_on(analytics::score_responses(&ds, &client))?
        }
        (None, None) => return Err(CliError::config("export-weights needs --scores or --config")),
    };
    create_dir(dir)?;
    if let Some(r) = resolved {
        record_config(dir, "export-weights", r)?;
    }
    let path = dir.join(WEIGHTS_FILE);
    let header = write_atomic(&path, |tmp| {
        write_weights(&ds, &by_problem, tmp).map_err(CliError::from)
    })?;
    out.say(format!(
        "wrote {} weights for {} examples to {}",
        header.num_tokens,
        header.num_examples,
        path.display()
    ));
    Ok(0)
}

fn gradcheck(objective: Objective, trials: usize, epsilon: f64, seed: u64, out: &Printer) -> Result<u8, CliError> {
    if trials == 0 {
        return Err(CliError::config("--trials must be at least 1"));
    }
    let mut frozen = 0.0f64;
    let mut control = 0.0f64;
    for i in 0..trials {
        let (model, batch) = seeded_fixture(seed.wrapping_add(i as u64));
        frozen = frozen.max(grad_check(&model, &batch, objective, epsilon, WeightHandling::Frozen)?.max_rel_err);
        control = control.max(grad_check(&model, &batch, objective, epsilon, WeightHandling::Recomputed)?.max_rel_err);
    }
    let pass = frozen < PASS_THRESHOLD;
    out.say(format!(
        "objective {objective:?}, {trials} trials, epsilon {epsilon:e}: max_rel_err {frozen:.3e} ({})",
        if pass { "PASS" } else { "FAIL" }
    ));
    out.say(format!("control with recomputed weights: max_rel_err {control:.3e}"));
    Ok(if pass { 0 } else { EXIT_NEGATIVE })
}
