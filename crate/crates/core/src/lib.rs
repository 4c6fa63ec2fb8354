//! Rewrites a supervised fine-tuning corpus so its training targets come
//! from the model being tuned whenever possible.
//!
//! Each problem is first answered by sampling the target policy
//! ([`rewriter`]); a correct sample is kept as on-policy data. Failing that,
//! the policy is shown the reference solution and asked to re-solve the
//! problem, and a correct retelling is kept under the original prompt. Only
//! when both fail is the expert demonstration used. Correctness comes from
//! the answer [`verifier`].
//!
//! The other modules read and write the datasets ([`corpus`]), talk to the
//! policy endpoint ([`policy`]), compute cross-entropy, DFT and
//! importance-weighted objectives with their gradient checks ([`loss`]), and
//! measure how far each subset sits from the policy ([`analytics`]).

pub mod analytics;
pub mod config;
pub mod corpus;
pub mod loss;
pub mod policy;
pub mod rewriter;
pub mod verifier;
