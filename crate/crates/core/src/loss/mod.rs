//! Token-level training objectives.
//!
//! All three objectives have the form `-Σ_t w_t · ln p_t` where `p_t` is the
//! target-policy probability of token t:
//!
//! * cross-entropy: `w_t = 1`
//! * DFT: `w_t = p_t` (importance weight with the mixture probability taken as 1)
//! * importance-sampled: `w_t = p_t / q_t` for an explicit mixture probability `q_t`
//!
//! Weights are plain values. Anything differentiating these losses must treat
//! them as constants; see [`gradcheck`].

pub mod export;
pub mod gradcheck;
pub mod micro;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("probability at position {position} is {value}, expected a value in (0, 1]")]
    Probability { position: usize, value: f64 },
    #[error("mixture probability at position {position} is {value}, expected a value in (0, 1]")]
    MixProbability { position: usize, value: f64 },
    #[error("{what}: expected {expected} values, found {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("weight at position {position} is {value}, expected a finite positive value")]
    Weight { position: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ce,
    Dft,
    Is,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(Objective::Ce),
            "dft" => Ok(Objective::Dft),
            "is" => Ok(Objective::Is),
            other => Err(format!("unknown objective `{other}` (expected ce, dft, or is)")),
        }
    }
}

/// Per-token weight as handed to a trainer. The weight carries no gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenWeightRecord {
    pub position: usize,
    pub target_prob: f64,
    pub weight: f64,
    pub gradient_blocked: bool,
}

/// Fixed-order pairwise summation, so a given input always sums to the same bits.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

fn check_probs(probs: &[f64]) -> Result<(), LossError> {
    for (position, &value) in probs.iter().enumerate() {
        if !(value > 0.0 && value <= 1.0) {
            return Err(LossError::Probability { position, value });
        }
    }
    Ok(())
}

/// `-Σ_t ln p_t`.
pub fn ce_loss(token_probs: &[f64]) -> Result<f64, LossError> {
    check_probs(token_probs)?;
    let logs: Vec<f64> = token_probs.iter().map(|p| p.ln()).collect();
    Ok(-pairwise_sum(&logs))
}

/// `-Σ_t w_t ln p_t` for caller-supplied weights.
pub fn weighted_loss(token_probs: &[f64], weights: &[f64]) -> Result<f64, LossError> {
    check_probs(token_probs)?;
    if weights.len() != token_probs.len() {
        return Err(LossError::Length {
            what: "weights",
            expected: token_probs.len(),
            found: weights.len(),
        });
    }
    for (position, &value) in weights.iter().enumerate() {
        if !(value.is_finite() && value > 0.0) {
            return Err(LossError::Weight { position, value });
        }
    }
    let terms: Vec<f64> = token_probs.iter().zip(weights).map(|(p, w)| w * p.ln()).collect();
    Ok(-pairwise_sum(&terms))
}

/// Importance weights `p_t / q_t`, or `p_t` when no mixture probabilities
/// are given.
pub fn importance_weights(token_probs: &[f64], mix_probs: Option<&[f64]>) -> Result<Vec<f64>, LossError> {
    check_probs(token_probs)?;
    match mix_probs {
        None => Ok(token_probs.to_vec()),
        Some(mix) => {
            if mix.len() != token_probs.len() {
                return Err(LossError::Length {
                    what: "mix_probs",
                    expected: token_probs.len(),
                    found: mix.len(),
                });
            }
            token_probs
                .iter()
                .zip(mix)
                .enumerate()
                .map(|(position, (&p, &q))| {
                    if q > 0.0 && q <= 1.0 {
                        Ok(p / q)
                    } else {
                        Err(LossError::MixProbability { position, value: q })
                    }
                })
                .collect()
        }
    }
}

/// The importance-weighted loss and the weights it used.
pub fn is_weighted_loss(
    token_probs: &[f64],
    mix_probs: Option<&[f64]>,
) -> Result<(f64, Vec<TokenWeightRecord>), LossError> {
    let weights = importance_weights(token_probs, mix_probs)?;
    let loss = weighted_loss(token_probs, &weights)?;
    let records = token_probs
        .iter()
        .zip(&weights)
        .enumerate()
        .map(|(position, (&p, &w))| TokenWeightRecord {
            position,
            target_prob: p,
            weight: w,
            gradient_blocked: true,
        })
        .collect();
    Ok((loss, records))
}

pub fn dft_loss(token_probs: &[f64]) -> Result<f64, LossError> {
    is_weighted_loss(token_probs, None).map(|(loss, _)| loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum over tokens, mean over examples.
    #[default]
    SumTokensMeanExamples,
    /// Mean over tokens within each example, then mean over examples.
    TokenMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub per_example_loss: Vec<f64>,
    pub mean_loss: f64,
    pub reduction: Reduction,
}

/// One training sequence: target probabilities, plus mixture probabilities
/// for the unapproximated importance objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleProbs {
    pub token_probs: Vec<f64>,
    pub mix_probs: Option<Vec<f64>>,
}

pub fn batch_loss(
    examples: &[ExampleProbs],
    objective: Objective,
    reduction: Reduction,
) -> Result<LossReport, LossError> {
    let mut per_example_loss = Vec::with_capacity(examples.len());
    for ex in examples {
        let sum = match objective {
            Objective::Ce => ce_loss(&ex.token_probs)?,
            Objective::Dft => dft_loss(&ex.token_probs)?,
            Objective::Is => is_weighted_loss(&ex.token_probs, ex.mix_probs.as_deref())?.0,
        };
        let value = match reduction {
            Reduction::SumTokensMeanExamples => sum,
            Reduction::TokenMean if ex.token_probs.is_empty() => 0.0,
            Reduction::TokenMean => sum / ex.token_probs.len() as f64,
        };
        per_example_loss.push(value);
    }
    let mean_loss = if per_example_loss.is_empty() {
        0.0
    } else {
        pairwise_sum(&per_example_loss) / per_example_loss.len() as f64
    };
    Ok(LossReport {
        per_example_loss,
        mean_loss,
        reduction,
    })
}
