//! A bigram softmax language model small enough to differentiate by hand.
//!
//! Parameters are a `(V + 1) × V` logit table: row `c < V` is the next-token
//! distribution after token `c`, and row `V` is the start-of-sequence context.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct MicroModel {
    vocab_size: usize,
    logits: Vec<f64>,
}

impl MicroModel {
    pub fn new(vocab_size: usize, logits: Vec<f64>) -> Option<Self> {
        if vocab_size == 0 || logits.len() != (vocab_size + 1) * vocab_size || logits.iter().any(|l| !l.is_finite()) {
            return None;
        }
        Some(MicroModel { vocab_size, logits })
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(vocab_size: usize, scale: f64, rng: &mut R) -> Self {
        let logits = (0..(vocab_size + 1) * vocab_size)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        MicroModel { vocab_size, logits }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn start_context(&self) -> usize {
        self.vocab_size
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn param_index(&self, context: usize, token: usize) -> usize {
        context * self.vocab_size + token
    }

    /// Softmax of one context row.
    pub fn conditional(&self, context: usize) -> Vec<f64> {
        let row = &self.logits[context * self.vocab_size..(context + 1) * self.vocab_size];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Contexts paired with targets for a token sequence.
    pub fn transitions<'a>(&self, tokens: &'a [usize]) -> impl Iterator<Item = (usize, usize)> + 'a {
        let start = self.start_context();
        tokens
            .iter()
            .enumerate()
            .map(move |(t, &y)| (if t == 0 { start } else { tokens[t - 1] }, y))
    }

    /// Target probability of every token of `tokens`.
    pub fn token_probs(&self, tokens: &[usize]) -> Vec<f64> {
        self.transitions(tokens).map(|(c, y)| self.conditional(c)[y]).collect()
    }

    /// Plain gradient step `θ ← θ - lr · g`.
    pub fn apply_update(&mut self, gradient: &[f64], learning_rate: f64) {
        for (p, g) in self.logits.iter_mut().zip(gradient) {
            *p -= learning_rate * g;
        }
    }
}
