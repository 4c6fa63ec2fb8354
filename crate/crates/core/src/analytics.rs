//! Policy-gap diagnostics and stage-count tables.
//!
//! The gap report scores responses under the target policy and averages the
//! log-probabilities per (subset, source) cell. Subsets are the provenance
//! classes of the mixture; sources are the original SFT demonstration and the
//! rewritten response. Expert examples keep the SFT demonstration, so that
//! subset has a single cell.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_json_line, MixtureDataset, Problem, Provenance, StageStats};
use crate::loss::pairwise_sum;
use crate::policy::{PolicyClient, PolicyError};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("example `{0}` has no matching problem in the corpus")]
    UnknownProblem(String),
    #[error(transparent)]
    Capability(PolicyError),
    #[error("scoring `{problem_id}` failed: {source}")]
    Scoring {
        problem_id: String,
        #[source]
        source: PolicyError,
    },
    #[error("nothing to report")]
    Empty,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    OriginalSft,
    Rewritten,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::OriginalSft => "original_sft",
            Source::Rewritten => "rewritten",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum of token logprobs per response, averaged over responses.
    #[default]
    PerSequenceSum,
    /// Mean token logprob per response, averaged over responses.
    PerToken,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::PerSequenceSum => "per_sequence_sum",
            Aggregation::PerToken => "per_token",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seq" | "per_sequence_sum" => Ok(Aggregation::PerSequenceSum),
            "token" | "per_token" => Ok(Aggregation::PerToken),
            other => Err(format!("unknown aggregation `{other}` (expected seq or token)")),
        }
    }
}

/// One cell of the gap table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGapReport {
    pub subset: Provenance,
    pub source: Source,
    /// Absent only when every response in the cell failed to score.
    pub avg_logprob: Option<f64>,
    pub num_examples: usize,
    pub aggregation: Aggregation,
    pub failures: usize,
    pub complete: bool,
}

/// Token logprobs of one scored response, or the reason scoring failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub problem_id: String,
    pub subset: Provenance,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Whether the orderings the diagnostics look for hold. `None` means a cell
/// needed for the comparison is missing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingFlags {
    pub gap_closed_self_align: Option<bool>,
    pub gap_closed_retell: Option<bool>,
    pub difficulty_ordering: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub config_digest: String,
    pub aggregation: Aggregation,
    pub rows: Vec<PolicyGapReport>,
    pub flags: OrderingFlags,
}

const CELLS: [(Provenance, Source); 5] = [
    (Provenance::SelfAlign, Source::OriginalSft),
    (Provenance::SelfAlign, Source::Rewritten),
    (Provenance::Retell, Source::OriginalSft),
    (Provenance::Retell, Source::Rewritten),
    (Provenance::Expert, Source::OriginalSft),
];

/// Scores every example's SFT demonstration and, outside the Expert subset,
/// its rewritten response. Completions are scored after the stored prompt.
/// An endpoint that cannot score at all aborts the report; individual
/// failures are recorded and counted against their cell.
pub async fn score_dataset(
    dataset: &MixtureDataset,
    problems: &[Problem],
    client: &PolicyClient,
) -> Result<Vec<ScoreRecord>, AnalyticsError> {
    let by_id: HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut jobs = Vec::new();
    for ex in &dataset.examples {
        let problem = by_id
            .get(ex.problem_id.as_str())
            .ok_or_else(|| AnalyticsError::UnknownProblem(ex.problem_id.clone()))?;
        jobs.push((ex, Source::OriginalSft, problem.expert_solution.as_str()));
        if ex.provenance != Provenance::Expert {
            jobs.push((ex, Source::Rewritten, ex.response.as_str()));
        }
    }

    let width = client.limits().max_in_flight;
    let results: Vec<_> = stream::iter(jobs)
        .map(|(ex, source, completion)| async move {
            let scored = client.score_logprobs(&ex.prompt, completion).await;
            (ex, source, scored)
        })
        .buffered(width)
        .collect()
        .await;

    let mut records = Vec::with_capacity(results.len());
    for (ex, source, scored) in results {
        let (token_logprobs, error) = match scored {
            Ok(lp) => (Some(lp), None),
            Err(PolicyError::Capability(msg)) => return Err(AnalyticsError::Capability(PolicyError::Capability(msg))),
            Err(e) => {
                log::warn!("scoring {} ({}) failed: {e}", ex.problem_id, source.as_str());
                (None, Some(e.to_string()))
            }
        };
        records.push(ScoreRecord {
            problem_id: ex.problem_id.clone(),
            subset: ex.provenance,
            source,
            token_logprobs,
            error,
        });
    }
    Ok(records)
}

/// Scores and aggregates in one step.
pub async fn gap_report(
    dataset: &MixtureDataset,
    problems: &[Problem],
    client: &PolicyClient,
    aggregation: Aggregation,
) -> Result<(GapReport, Vec<ScoreRecord>), AnalyticsError> {
    let scores = score_dataset(dataset, problems, client).await?;
    let report = aggregate(&scores, aggregation, &dataset.header.config_digest);
    Ok((report, scores))
}

/// Builds the gap table from score records. Only cells with at least one
/// record are emitted, in a fixed order.
pub fn aggregate(scores: &[ScoreRecord], aggregation: Aggregation, config_digest: &str) -> GapReport {
    let mut cells: BTreeMap<(usize, Source), (Vec<f64>, usize)> = BTreeMap::new();
    let cell_rank = |p: Provenance| Provenance::ALL.iter().position(|&q| q == p).unwrap_or(0);
    for rec in scores {
        let entry = cells.entry((cell_rank(rec.subset), rec.source)).or_default();
        match &rec.token_logprobs {
            Some(lps) => {
                let sum = pairwise_sum(lps);
                let value = match aggregation {
                    Aggregation::PerSequenceSum => sum,
                    Aggregation::PerToken if lps.is_empty() => 0.0,
                    Aggregation::PerToken => sum / lps.len() as f64,
                };
                entry.0.push(value);
            }
            None => entry.1 += 1,
        }
    }

    let mut rows = Vec::new();
    for (subset, source) in CELLS {
        let Some((values, failures)) = cells.get(&(cell_rank(subset), source)) else {
            continue;
        };
        let avg_logprob = (!values.is_empty()).then(|| pairwise_sum(values) / values.len() as f64);
        rows.push(PolicyGapReport {
            subset,
            source,
            avg_logprob,
            num_examples: values.len(),
            aggregation,
            failures: *failures,
            complete: *failures == 0,
        });
    }
    let flags = ordering_flags(&rows);
    GapReport {
        config_digest: config_digest.to_string(),
        aggregation,
        rows,
        flags,
    }
}

fn cell(rows: &[PolicyGapReport], subset: Provenance, source: Source) -> Option<f64> {
    rows.iter()
        .find(|r| r.subset == subset && r.source == source)
        .and_then(|r| r.avg_logprob)
}

pub fn ordering_flags(rows: &[PolicyGapReport]) -> OrderingFlags {
    let closed = |subset| {
        let sft = cell(rows, subset, Source::OriginalSft)?;
        let rewritten = cell(rows, subset, Source::Rewritten)?;
        Some(rewritten > sft)
    };
    let difficulty = (|| {
        let a = cell(rows, Provenance::SelfAlign, Source::OriginalSft)?;
        let b = cell(rows, Provenance::Retell, Source::OriginalSft)?;
        let c = cell(rows, Provenance::Expert, Source::OriginalSft)?;
        Some(a > b && b > c)
    })();
    OrderingFlags {
        gap_closed_self_align: closed(Provenance::SelfAlign),
        gap_closed_retell: closed(Provenance::Retell),
        difficulty_ordering: difficulty,
    }
}

/// Logprobs of each example's training response, taken from score records:
/// the rewritten response for sampled examples, the demonstration for Expert.
pub fn response_scores(scores: &[ScoreRecord]) -> HashMap<String, Vec<f64>> {
    scores
        .iter()
        .filter(|r| match r.subset {
            Provenance::Expert => r.source == Source::OriginalSft,
            _ => r.source == Source::Rewritten,
        })
        .filter_map(|r| r.token_logprobs.clone().map(|lp| (r.problem_id.clone(), lp)))
        .collect()
}

/// Scores every training response after its stored prompt. Unlike the gap
/// report, any failure is an error: weights cannot be exported partially.
pub async fn score_responses(
    dataset: &MixtureDataset,
    client: &PolicyClient,
) -> Result<HashMap<String, Vec<f64>>, AnalyticsError> {
    let width = client.limits().max_in_flight;
    let results: Vec<_> = stream::iter(&dataset.examples)
        .map(|ex| async move { (ex, client.score_logprobs(&ex.prompt, &ex.response).await) })
        .buffered(width)
        .collect()
        .await;
    let mut out = HashMap::with_capacity(results.len());
    for (ex, scored) in results {
        match scored {
            Ok(lp) => {
                out.insert(ex.problem_id.clone(), lp);
            }
            Err(e @ PolicyError::Capability(_)) => return Err(AnalyticsError::Capability(e)),
            Err(source) => {
                return Err(AnalyticsError::Scoring {
                    problem_id: ex.problem_id.clone(),
                    source,
                })
            }
        }
    }
    Ok(out)
}

pub fn stats_table(dataset: &MixtureDataset) -> StageStats {
    StageStats::count(&dataset.examples)
}

pub fn render_stats(stats: &StageStats, config_digest: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# config_digest: {config_digest}");
    let _ = writeln!(out, "{:<12}{:>10}", "subset", "count");
    for p in Provenance::ALL {
        let _ = writeln!(out, "{:<12}{:>10}", p.as_str(), stats.get(p));
    }
    let _ = writeln!(out, "{:<12}{:>10}", "total", stats.total);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TableText,
    LineRecords,
    PlotSeries,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [
        ReportFormat::TableText,
        ReportFormat::LineRecords,
        ReportFormat::PlotSeries,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::TableText => "gap_report.txt",
            ReportFormat::LineRecords => "gap_report.jsonl",
            ReportFormat::PlotSeries => "gap_report.csv",
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine {
    Header {
        config_digest: String,
        aggregation: Aggregation,
        flags: OrderingFlags,
    },
    Row(PolicyGapReport),
}

fn flag_text(flag: Option<bool>) -> &'static str {
    match flag {
        Some(true) => "holds",
        Some(false) => "does not hold",
        None => "n/a",
    }
}

pub fn render_report(report: &GapReport, format: ReportFormat) -> Result<String, AnalyticsError> {
    if report.rows.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let mut out = String::new();
    match format {
        ReportFormat::TableText => {
            let _ = writeln!(out, "# config_digest: {}", report.config_digest);
            let _ = writeln!(out, "# aggregation: {}", report.aggregation.as_str());
            let _ = writeln!(
                out,
                "# gap closed (self_align): {}",
                flag_text(report.flags.gap_closed_self_align)
            );
            let _ = writeln!(
                out,
                "# gap closed (retell): {}",
                flag_text(report.flags.gap_closed_retell)
            );
            let _ = writeln!(
                out,
                "# difficulty ordering: {}",
                flag_text(report.flags.difficulty_ordering)
            );
            let _ = writeln!(
                out,
                "{:<12}{:<14}{:>16}{:>14}{:>10}",
                "subset", "source", "avg_logprob", "num_examples", "failures"
            );
            for r in &report.rows {
                let avg = r.avg_logprob.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
                let _ = writeln!(
                    out,
                    "{:<12}{:<14}{:>16}{:>14}{:>10}",
                    r.subset.as_str(),
                    r.source.as_str(),
                    avg,
                    r.num_examples,
                    r.failures
                );
            }
        }
        ReportFormat::LineRecords => {
            let mut buf = Vec::new();
            let header = ReportLine::Header {
                config_digest: report.config_digest.clone(),
                aggregation: report.aggregation,
                flags: report.flags.clone(),
            };
            write_json_line(&mut buf, &header).expect("writing to a Vec cannot fail");
            for r in &report.rows {
                write_json_line(&mut buf, &ReportLine::Row(r.clone())).expect("writing to a Vec cannot fail");
            }
            out = String::from_utf8(buf).expect("serde_json emits UTF-8");
        }
        ReportFormat::PlotSeries => {
            let _ = writeln!(out, "# config_digest: {}", report.config_digest);
            let _ = writeln!(out, "x,y,group");
            for r in report.rows.iter().filter(|r| r.avg_logprob.is_some()) {
                let _ = writeln!(
                    out,
                    "{},{},{}",
                    r.subset.as_str(),
                    r.avg_logprob.unwrap_or_default(),
                    r.source.as_str()
                );
            }
        }
    }
    Ok(out)
}

pub fn emit_report(report: &GapReport, format: ReportFormat, path: &Path) -> Result<(), AnalyticsError> {
    let text = render_report(report, format)?;
    std::fs::write(path, text).map_err(|source| AnalyticsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads the rows back from a line-records report.
pub fn parse_report_records(text: &str) -> Result<GapReport, AnalyticsError> {
    let mut report: Option<GapReport> = None;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReportLine = serde_json::from_str(line).map_err(|e| AnalyticsError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        match (parsed, report.as_mut()) {
            (
                ReportLine::Header {
                    config_digest,
                    aggregation,
                    flags,
                },
                None,
            ) => {
                report = Some(GapReport {
                    config_digest,
                    aggregation,
                    rows: Vec::new(),
                    flags,
                })
            }
            (ReportLine::Row(row), Some(r)) => r.rows.push(row),
            _ => {
                return Err(AnalyticsError::Malformed {
                    line: idx + 1,
                    message: "header must come first, exactly once".into(),
                })
            }
        }
    }
    report.ok_or(AnalyticsError::Empty)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ScoreLine {
    Header { config_digest: String },
    Score(ScoreRecord),
}

pub fn write_scores(scores: &[ScoreRecord], config_digest: &str, path: &Path) -> Result<(), AnalyticsError> {
    let io_err = |source| AnalyticsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    write_json_line(
        &mut out,
        &ScoreLine::Header {
            config_digest: config_digest.to_string(),
        },
    )
    .map_err(io_err)?;
    for s in scores {
        write_json_line(&mut out, &ScoreLine::Score(s.clone())).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Returns the config digest and the score records.
pub fn read_scores(path: &Path) -> Result<(String, Vec<ScoreRecord>), AnalyticsError> {
    let io_err = |source| AnalyticsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut digest = None;
    let mut scores = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| AnalyticsError::Malformed { line: idx + 1, message };
        match serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))? {
            ScoreLine::Header { config_digest } if digest.is_none() => digest = Some(config_digest),
            ScoreLine::Score(s) if digest.is_some() => scores.push(s),
            _ => return Err(malformed("header must come first, exactly once".into())),
        }
    }
    let digest = digest.ok_or(AnalyticsError::Empty)?;
    Ok((digest, scores))
}
