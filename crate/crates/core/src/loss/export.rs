//! Per-token weights for an external trainer.
//!
//! Each response token gets `weight = exp(logprob)`: the importance weight
//! with the mixture probability taken as 1. The output is JSON lines: one
//! header record, then one record per token in dataset order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_json_line, MixtureDataset, Provenance};

pub const WEIGHTS_SCHEMA_VERSION: u32 = 1;
pub const APPROXIMATION: &str = "mix_prob_one";
/// Smallest weight written, so every exported weight stays strictly positive.
pub const MIN_WEIGHT: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("example `{problem_id}`: no token scores")]
    MissingScores { problem_id: String },
    #[error("example `{problem_id}`: {found} token scores for response_token_count {expected}")]
    LengthMismatch {
        problem_id: String,
        expected: usize,
        found: usize,
    },
    #[error("example `{problem_id}` token {token_index}: invalid logprob {value}")]
    InvalidLogprob {
        problem_id: String,
        token_index: usize,
        value: f64,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub schema_version: u32,
    pub config_digest: String,
    pub approximation: String,
    pub num_examples: usize,
    pub num_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub problem_id: String,
    pub provenance: Provenance,
    pub token_index: usize,
    pub logprob: f64,
    pub weight: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum WeightsLine {
    Header(WeightsHeader),
    Token(WeightRecord),
}

/// Builds the weight records. `scores` maps problem id to the response's
/// token logprobs under the target policy.
pub fn export_weights(
    dataset: &MixtureDataset,
    scores: &HashMap<String, Vec<f64>>,
) -> Result<(WeightsHeader, Vec<WeightRecord>), ExportError> {
    let mut records = Vec::new();
    for ex in &dataset.examples {
        let lps = scores.get(&ex.problem_id).ok_or_else(|| ExportError::MissingScores {
            problem_id: ex.problem_id.clone(),
        })?;
        if lps.len() != ex.response_token_count {
            return Err(ExportError::LengthMismatch {
                problem_id: ex.problem_id.clone(),
                expected: ex.response_token_count,
                found: lps.len(),
            });
        }
        for (token_index, &logprob) in lps.iter().enumerate() {
            if !(logprob.is_finite() || logprob == f64::NEG_INFINITY) || logprob > 1e-6 {
                return Err(ExportError::InvalidLogprob {
                    problem_id: ex.problem_id.clone(),
                    token_index,
                    value: logprob,
                });
            }
            let logprob = logprob.min(0.0);
            records.push(WeightRecord {
                problem_id: ex.problem_id.clone(),
                provenance: ex.provenance,
                token_index,
                logprob,
                weight: logprob.exp().max(MIN_WEIGHT),
            });
        }
    }
    let header = WeightsHeader {
        schema_version: WEIGHTS_SCHEMA_VERSION,
        config_digest: dataset.header.config_digest.clone(),
        approximation: APPROXIMATION.into(),
        num_examples: dataset.examples.len(),
        num_tokens: records.len(),
    };
    Ok((header, records))
}

pub fn encode_weights<W: Write>(header: &WeightsHeader, records: &[WeightRecord], out: &mut W) -> io::Result<()> {
    write_json_line(out, &WeightsLine::Header(header.clone()))?;
    for r in records {
        write_json_line(out, &WeightsLine::Token(r.clone()))?;
    }
    Ok(())
}

/// Builds the records and writes them to `path`. Nothing is written if any
/// example fails validation.
pub fn write_weights(
    dataset: &MixtureDataset,
    scores: &HashMap<String, Vec<f64>>,
    path: &Path,
) -> Result<WeightsHeader, ExportError> {
    let (header, records) = export_weights(dataset, scores)?;
    let io_err = |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    encode_weights(&header, &records, &mut out).map_err(io_err)?;
    out.flush().map_err(io_err)?;
    Ok(header)
}
