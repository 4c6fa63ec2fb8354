//! Binary correctness reward: extract the final answer from a response and
//! compare it to the gold answer.
//!
//! Numbers compare as exact rationals (`\frac{1}{2}`, `1/2`, and `0.5` are all
//! equal). Anything else compares as normalized text, so algebraically equal
//! but differently written expressions such as `x+1` and `1+x` do not match.

mod extract;
mod normalize;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use extract::{last_boxed_span, marker_span, DEFAULT_ANSWER_MARKERS};
pub use normalize::{
    canonical_rational, normalize_answer, normalize_text, AnswerKind, NormalizedAnswer, MAX_FRACTION_DIGITS,
    NORMALIZATION_VERSION,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    /// The matched span, verbatim from the response.
    pub raw: String,
    pub normalized: String,
    pub kind: AnswerKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verifier {
    markers: Vec<String>,
}

impl Default for Verifier {
    fn default() -> Self {
        Verifier {
            markers: DEFAULT_ANSWER_MARKERS.iter().map(|m| m.to_string()).collect(),
        }
    }
}

impl Verifier {
    pub fn with_markers(markers: Vec<String>) -> Self {
        Verifier { markers }
    }

    pub fn markers(&self) -> &[String] {
        &self.markers
    }

    /// The last balanced box if there is one, else whatever follows the last
    /// answer marker on its line.
    pub fn extract_answer(&self, response: &str) -> Option<ExtractedAnswer> {
        let span = last_boxed_span(response).or_else(|| marker_span(response, &self.markers))?;
        let raw = &response[span];
        let norm = normalize_answer(raw);
        Some(ExtractedAnswer {
            raw: raw.to_string(),
            normalized: norm.normalized,
            kind: norm.kind,
        })
    }

    pub fn verify(&self, response: &str, gold: &str) -> bool {
        self.extract_answer(response)
            .is_some_and(|a| answers_equivalent(&a, gold))
    }
}

pub fn extract_answer(response: &str) -> Option<ExtractedAnswer> {
    Verifier::default().extract_answer(response)
}

pub fn answers_equivalent(answer: &ExtractedAnswer, gold: &str) -> bool {
    equivalent_text(&answer.raw, gold)
}

/// Symmetric equivalence of two answer strings.
pub fn equivalent_text(a: &str, b: &str) -> bool {
    let a = normalize_answer(a);
    let b = normalize_answer(b);
    match (&a.value, &b.value) {
        (Some(x), Some(y)) => x == y,
        _ => a.normalized == b.normalized,
    }
}

pub fn verify(response: &str, gold: &str) -> bool {
    Verifier::default().verify(response, gold)
}

#[derive(Debug, Error)]
pub enum CorpusFileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// One `(response, gold, expected)` row of a verifier test corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifierCase {
    pub line: usize,
    pub response: String,
    pub gold: String,
    pub expected: bool,
}

/// Parses a tab-separated corpus. Blank lines and lines starting with `#`
/// are skipped; responses are single-line and unescaped.
pub fn parse_verifier_corpus(text: &str) -> Result<Vec<VerifierCase>, CorpusFileError> {
    let mut cases = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [response, gold, expected] = fields[..] else {
            return Err(CorpusFileError::Malformed {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        let expected = match expected.trim() {
            "true" => true,
            "false" => false,
            other => {
                return Err(CorpusFileError::Malformed {
                    line: line_no,
                    message: format!("expected `true` or `false`, found `{other}`"),
                })
            }
        };
        cases.push(VerifierCase {
            line: line_no,
            response: response.to_string(),
            gold: gold.to_string(),
            expected,
        });
    }
    Ok(cases)
}

pub fn load_verifier_corpus(path: &Path) -> Result<Vec<VerifierCase>, CorpusFileError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_verifier_corpus(&text)
}

#[derive(Debug, Clone, Default)]
pub struct CorpusOutcome {
    pub total: usize,
    pub agreed: usize,
    pub disagreements: Vec<VerifierCase>,
}

impl CorpusOutcome {
    pub fn all_agree(&self) -> bool {
        self.disagreements.is_empty()
    }
}

pub fn run_verifier_corpus(verifier: &Verifier, cases: &[VerifierCase]) -> CorpusOutcome {
    let mut outcome = CorpusOutcome::default();
    for case in cases {
        outcome.total += 1;
        if verifier.verify(&case.response, &case.gold) == case.expected {
            outcome.agreed += 1;
        } else {
            outcome.disagreements.push(case.clone());
        }
    }
    outcome
}
