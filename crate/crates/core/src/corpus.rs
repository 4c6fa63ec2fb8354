//! Problem corpora and mixture datasets.
//!
//! Input corpora are plain JSON lines, one `{id, statement, expert_solution,
//! gold_answer}` object per line. Mixture files carry a header record, one
//! record per rewritten example, and a trailing stats record:
//!
//! ```text
//! {"record":"header","schema_version":1,"created_at":"...","config_digest":"..."}
//! {"record":"example","problem_id":"p1",...}
//! {"record":"stats","self_align":2,"retell":1,"expert":1,"total":4}
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIXTURE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate problem id `{0}`")]
    DuplicateId(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One task instance: the prompt material plus the behavior-policy demonstration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    pub expert_solution: String,
    pub gold_answer: String,
}

impl Problem {
    fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.statement.trim().is_empty() {
            return Err(format!("problem `{}` has an empty statement", self.id));
        }
        if self.expert_solution.trim().is_empty() {
            return Err(format!("problem `{}` has an empty expert_solution", self.id));
        }
        Ok(())
    }
}

/// Which stage of the rewriting hierarchy produced an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SelfAlign,
    Retell,
    Expert,
}

impl Provenance {
    pub const ALL: [Provenance; 3] = [Provenance::SelfAlign, Provenance::Retell, Provenance::Expert];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::SelfAlign => "self_align",
            Provenance::Retell => "retell",
            Provenance::Expert => "expert",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A training record in the mixture dataset.
///
/// `prompt` is always the original problem prompt, even for retold responses.
/// For `Expert` records the sample counts cover every candidate drawn across
/// both sampling stages and `selected_index` is absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewrittenExample {
    pub problem_id: String,
    pub prompt: String,
    pub response: String,
    pub provenance: Provenance,
    pub num_candidates_sampled: usize,
    pub num_correct: usize,
    pub selected_index: Option<usize>,
    pub response_token_count: usize,
    /// Set when the example fell back to the expert demonstration because the
    /// policy endpoint failed, rather than because every candidate was wrong.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RewrittenExample {
    fn check(&self) -> Result<(), String> {
        if self.response_token_count == 0 {
            return Err(format!("example `{}` has response_token_count 0", self.problem_id));
        }
        match self.provenance {
            Provenance::SelfAlign | Provenance::Retell => {
                if self.num_correct == 0 {
                    return Err(format!(
                        "{} example `{}` has no correct candidates",
                        self.provenance, self.problem_id
                    ));
                }
                match self.selected_index {
                    Some(i) if i < self.num_candidates_sampled => Ok(()),
                    _ => Err(format!(
                        "{} example `{}` has selected_index outside 0..{}",
                        self.provenance, self.problem_id, self.num_candidates_sampled
                    )),
                }
            }
            Provenance::Expert => {
                if self.selected_index.is_some() {
                    return Err(format!("expert example `{}` carries a selected_index", self.problem_id));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub self_align: usize,
    pub retell: usize,
    pub expert: usize,
    pub total: usize,
}

impl StageStats {
    pub fn count<'a>(examples: impl IntoIterator<Item = &'a RewrittenExample>) -> Self {
        let mut stats = StageStats::default();
        for ex in examples {
            match ex.provenance {
                Provenance::SelfAlign => stats.self_align += 1,
                Provenance::Retell => stats.retell += 1,
                Provenance::Expert => stats.expert += 1,
            }
            stats.total += 1;
        }
        stats
    }

    pub fn get(&self, provenance: Provenance) -> usize {
        match provenance {
            Provenance::SelfAlign => self.self_align,
            Provenance::Retell => self.retell,
            Provenance::Expert => self.expert,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureHeader {
    pub schema_version: u32,
    pub created_at: String,
    pub config_digest: String,
}

/// The rewritten dataset: self-aligned, retold, and fallback examples in
/// corpus order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixtureDataset {
    pub header: MixtureHeader,
    pub examples: Vec<RewrittenExample>,
    pub stats: StageStats,
}

impl MixtureDataset {
    pub fn new(header: MixtureHeader, examples: Vec<RewrittenExample>) -> Self {
        let stats = StageStats::count(&examples);
        MixtureDataset {
            header,
            examples,
            stats,
        }
    }

    /// Checks the invariants that hold without the source corpus: per-example
    /// constraints, unique problem ids, and stats matching a recount.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::with_capacity(self.examples.len());
        for ex in &self.examples {
            ex.check().map_err(CorpusError::Invalid)?;
            if !seen.insert(ex.problem_id.as_str()) {
                return Err(CorpusError::Invalid(format!(
                    "problem `{}` appears more than once",
                    ex.problem_id
                )));
            }
        }
        let recount = StageStats::count(&self.examples);
        if recount != self.stats {
            return Err(CorpusError::Invalid(format!(
                "stats {:?} do not match recount {:?}",
                self.stats, recount
            )));
        }
        Ok(())
    }

    /// Checks the partition property against the corpus the dataset was
    /// built from: every problem has exactly one example, and fallback
    /// examples reproduce the expert demonstration verbatim.
    pub fn validate_against(&self, problems: &[Problem]) -> Result<(), CorpusError> {
        self.validate()?;
        if self.examples.len() != problems.len() {
            return Err(CorpusError::Invalid(format!(
                "{} examples for {} problems",
                self.examples.len(),
                problems.len()
            )));
        }
        let by_id: HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
        for ex in &self.examples {
            let problem = by_id
                .get(ex.problem_id.as_str())
                .ok_or_else(|| CorpusError::Invalid(format!("example for unknown problem `{}`", ex.problem_id)))?;
            if ex.provenance == Provenance::Expert && ex.response != problem.expert_solution {
                return Err(CorpusError::Invalid(format!(
                    "expert example `{}` differs from the expert demonstration",
                    ex.problem_id
                )));
            }
        }
        Ok(())
    }
}

/// Counts tokens for the overlong filter.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-delimited word count.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl TokenCounter for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

impl<F> TokenCounter for F
where
    F: Fn(&str) -> usize + Send + Sync,
{
    fn count(&self, text: &str) -> usize {
        self(text)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: usize,
    pub dropped_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestOutcome {
    pub problems: Vec<Problem>,
    pub report: FilterReport,
}

/// Reads a corpus and drops problems whose statement plus expert solution
/// exceed `max_tokens` under the whitespace tokenizer.
pub fn ingest_corpus(path: &Path, max_tokens: usize) -> Result<IngestOutcome, CorpusError> {
    ingest_corpus_with(path, max_tokens, &WhitespaceTokenizer)
}

pub fn ingest_corpus_with(
    path: &Path,
    max_tokens: usize,
    tokenizer: &dyn TokenCounter,
) -> Result<IngestOutcome, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_corpus(BufReader::new(file), max_tokens, tokenizer).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::io(path, source),
        other => other,
    })
}

pub fn read_corpus<R: BufRead>(
    reader: R,
    max_tokens: usize,
    tokenizer: &dyn TokenCounter,
) -> Result<IngestOutcome, CorpusError> {
    let mut seen = HashSet::new();
    let mut problems = Vec::new();
    let mut report = FilterReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::io(Path::new("<corpus>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let problem: Problem = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        problem
            .check()
            .map_err(|message| CorpusError::Malformed { line: line_no, message })?;
        if !seen.insert(problem.id.clone()) {
            return Err(CorpusError::DuplicateId(problem.id));
        }
        let tokens = tokenizer.count(&problem.statement) + tokenizer.count(&problem.expert_solution);
        if tokens <= max_tokens {
            report.kept += 1;
            problems.push(problem);
        } else {
            report.dropped += 1;
            report.dropped_ids.push(problem.id);
        }
    }
    Ok(IngestOutcome { problems, report })
}

pub fn write_corpus(problems: &[Problem], path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in problems {
        write_json_line(&mut out, p).map_err(|e| CorpusError::io(path, e))?;
    }
    out.flush().map_err(|e| CorpusError::io(path, e))
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum MixtureRecord {
    Header(MixtureHeader),
    Example(RewrittenExample),
    Stats(StageStats),
}

pub fn write_mixture(dataset: &MixtureDataset, path: &Path) -> Result<(), CorpusError> {
    dataset.validate()?;
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = BufWriter::new(file);
    encode_mixture(dataset, &mut out).map_err(|e| CorpusError::io(path, e))?;
    out.flush().map_err(|e| CorpusError::io(path, e))
}

/// Serializes a dataset to any writer. Validation is the caller's job.
pub fn encode_mixture<W: Write>(dataset: &MixtureDataset, out: &mut W) -> io::Result<()> {
    write_json_line(out, &MixtureRecord::Header(dataset.header.clone()))?;
    for ex in &dataset.examples {
        write_json_line(out, &MixtureRecord::Example(ex.clone()))?;
    }
    write_json_line(out, &MixtureRecord::Stats(dataset.stats))
}

pub fn read_mixture(path: &Path) -> Result<MixtureDataset, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    decode_mixture(BufReader::new(file))
}

pub fn decode_mixture<R: Read>(reader: R) -> Result<MixtureDataset, CorpusError> {
    let mut header = None;
    let mut stats = None;
    let mut examples = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::io(Path::new("<mixture>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MixtureRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let misplaced = |what: &str| CorpusError::Malformed {
            line: line_no,
            message: format!("unexpected {what} record"),
        };
        match record {
            MixtureRecord::Header(h) => {
                if line_no != 1 || header.is_some() {
                    return Err(misplaced("header"));
                }
                if h.schema_version != MIXTURE_SCHEMA_VERSION {
                    return Err(CorpusError::Malformed {
                        line: line_no,
                        message: format!("unsupported schema_version {}", h.schema_version),
                    });
                }
                header = Some(h);
            }
            MixtureRecord::Example(ex) => {
                if header.is_none() || stats.is_some() {
                    return Err(misplaced("example"));
                }
                examples.push(ex);
            }
            MixtureRecord::Stats(s) => {
                if header.is_none() || stats.is_some() {
                    return Err(misplaced("stats"));
                }
                stats = Some(s);
            }
        }
    }
    let header = header.ok_or_else(|| CorpusError::Invalid("missing header record".into()))?;
    let stats = stats.ok_or_else(|| CorpusError::Invalid("missing stats record".into()))?;
    let dataset = MixtureDataset {
        header,
        examples,
        stats,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub(crate) fn write_json_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}
