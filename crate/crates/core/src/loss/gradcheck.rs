//! Finite-difference check of the analytic gradient on the micro-model.
//!
//! With token weights held fixed, the gradient of `-w ln p_y` with respect
//! to the logits `z` of its context row is `-w (1[j = y] - p_j)`. The check
//! compares that against central differences of the batch loss. In
//! [`WeightHandling::Frozen`] mode the finite differences reuse the weights
//! computed at the base point, which is what the analytic gradient assumes.
//! [`WeightHandling::Recomputed`] lets the weights move with the parameters
//! and serves as a negative control: for DFT and IS it should disagree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use super::micro::MicroModel;
use super::{pairwise_sum, Objective};

pub const DEFAULT_EPSILON: f64 = 1e-5;
/// A check passes when the maximum relative error is below this.
pub const PASS_THRESHOLD: f64 = 1e-5;
pub const MAX_EPSILON: f64 = 1e-2;
/// Denominator floor for relative error, so near-zero gradients compare on
/// an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error("epsilon {0} is outside (0, {MAX_EPSILON}]")]
    Epsilon(f64),
    #[error("loss is not finite ({0})")]
    NonFinite(f64),
    #[error("sequence {sequence}: {message}")]
    Batch { sequence: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightHandling {
    Frozen,
    Recomputed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSequence {
    pub tokens: Vec<usize>,
    /// Mixture probabilities, used only by the IS objective.
    pub mix_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub objective: Objective,
    pub weights: WeightHandling,
    pub epsilon: f64,
    pub num_params: usize,
    pub loss: f64,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

fn check_batch(model: &MicroModel, batch: &[GradSequence], objective: Objective) -> Result<(), GradCheckError> {
    for (i, seq) in batch.iter().enumerate() {
        let err = |message: String| GradCheckError::Batch { sequence: i, message };
        if let Some(&bad) = seq.tokens.iter().find(|&&t| t >= model.vocab_size()) {
            return Err(err(format!("token {bad} outside vocabulary of {}", model.vocab_size())));
        }
        if objective == Objective::Is {
            match &seq.mix_probs {
                Some(m) if m.len() == seq.tokens.len() => {
                    if let Some(q) = m.iter().find(|q| !(**q > 0.0 && **q <= 1.0)) {
                        return Err(err(format!("mixture probability {q} outside (0, 1]")));
                    }
                }
                Some(m) => {
                    return Err(err(format!(
                        "{} mixture probabilities for {} tokens",
                        m.len(),
                        seq.tokens.len()
                    )))
                }
                None => return Err(err("IS objective needs mixture probabilities".into())),
            }
        }
    }
    Ok(())
}

/// Token weights of every sequence at the model's current parameters.
pub fn token_weights(model: &MicroModel, batch: &[GradSequence], objective: Objective) -> Vec<Vec<f64>> {
    batch
        .iter()
        .map(|seq| {
            let probs = model.token_probs(&seq.tokens);
            match objective {
                Objective::Ce => vec![1.0; probs.len()],
                Objective::Dft => probs,
                Objective::Is => {
                    let mix = seq.mix_probs.as_deref().unwrap_or(&[]);
                    probs.iter().zip(mix).map(|(p, q)| p / q).collect()
                }
            }
        })
        .collect()
}

/// Mean over sequences of `-Σ_t w_t ln p_t`.
pub fn batch_objective(model: &MicroModel, batch: &[GradSequence], weights: &[Vec<f64>]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let per_seq: Vec<f64> = batch
        .iter()
        .zip(weights)
        .map(|(seq, w)| {
            let terms: Vec<f64> = model
                .token_probs(&seq.tokens)
                .iter()
                .zip(w)
                .map(|(p, w)| w * p.ln())
                .collect();
            -pairwise_sum(&terms)
        })
        .collect();
    pairwise_sum(&per_seq) / batch.len() as f64
}

/// Gradient of [`batch_objective`] with the weights treated as constants.
pub fn analytic_gradient(model: &MicroModel, batch: &[GradSequence], weights: &[Vec<f64>]) -> Vec<f64> {
    let mut grad = vec![0.0; model.num_params()];
    if batch.is_empty() {
        return grad;
    }
    let n = batch.len() as f64;
    for (seq, w) in batch.iter().zip(weights) {
        for ((context, target), &wt) in model.transitions(&seq.tokens).zip(w) {
            let probs = model.conditional(context);
            for (j, p) in probs.iter().enumerate() {
                let indicator = if j == target { 1.0 } else { 0.0 };
                grad[model.param_index(context, j)] -= wt / n * (indicator - p);
            }
        }
    }
    grad
}

pub fn grad_check(
    model: &MicroModel,
    batch: &[GradSequence],
    objective: Objective,
    epsilon: f64,
    handling: WeightHandling,
) -> Result<GradCheckReport, GradCheckError> {
    if !(epsilon > 0.0 && epsilon <= MAX_EPSILON) {
        return Err(GradCheckError::Epsilon(epsilon));
    }
    check_batch(model, batch, objective)?;

    let base_weights = token_weights(model, batch, objective);
    let loss = batch_objective(model, batch, &base_weights);
    if !loss.is_finite() {
        return Err(GradCheckError::NonFinite(loss));
    }
    let analytic = analytic_gradient(model, batch, &base_weights);

    let eval = |m: &MicroModel| -> Result<f64, GradCheckError> {
        let value = match handling {
            WeightHandling::Frozen => batch_objective(m, batch, &base_weights),
            WeightHandling::Recomputed => batch_objective(m, batch, &token_weights(m, batch, objective)),
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(GradCheckError::NonFinite(value))
        }
    };

    let mut probe = model.clone();
    let mut max_abs_err = 0.0f64;
    let mut max_rel_err = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let original = probe.params()[i];
        probe.params_mut()[i] = original + epsilon;
        let plus = eval(&probe)?;
        probe.params_mut()[i] = original - epsilon;
        let minus = eval(&probe)?;
        probe.params_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(rel);
    }

    Ok(GradCheckReport {
        objective,
        weights: handling,
        epsilon,
        num_params: model.num_params(),
        loss,
        max_abs_err,
        max_rel_err,
    })
}

/// A random micro-model and batch: vocabulary 3 to 6, 1 to 4 sequences of
/// 1 to 8 tokens, mixture probabilities in [0.05, 1].
pub fn random_fixture<R: Rng + ?Sized>(rng: &mut R) -> (MicroModel, Vec<GradSequence>) {
    let vocab = rng.gen_range(3..=6);
    let model = MicroModel::random(vocab, 2.0, rng);
    let batch = (0..rng.gen_range(1..=4))
        .map(|_| {
            let len = rng.gen_range(1..=8);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
            let mix_probs = Some((0..len).map(|_| rng.gen_range(0.05..=1.0)).collect());
            GradSequence { tokens, mix_probs }
        })
        .collect();
    (model, batch)
}

pub fn seeded_fixture(seed: u64) -> (MicroModel, Vec<GradSequence>) {
    random_fixture(&mut ChaCha8Rng::seed_from_u64(seed))
}
