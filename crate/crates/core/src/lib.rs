//! Case-based retrieval learning with a neural-linear logistic UCB reranker.
//!
//! A case bank stores successful (query, solution) pairs. Each step recalls
//! the most similar cases by a fixed embedding, reranks them with a
//! contextual bandit trained from binary feedback, and retains the new case
//! when the outcome succeeds. Synthetic environments expose the true expected
//! utility so regret can be split into a coverage gap and a retrieval regret.

// Negated comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandit;
pub mod casebank;
pub mod config;
pub mod encoder;
pub mod engine;
pub mod env;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod par;
pub mod rng;
pub mod validate;

pub use bandit::{
    BanditPolicy, DiscoveryGate, DiscoveryMetric, PolicyConfig, PolicyKind, ScoreBreakdown,
};
pub use casebank::{Case, CaseBank};
pub use encoder::{Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use linalg::{Matrix, PdInverse};

/// Logistic function, evaluated without exponentiating large positive arguments.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-r·log σ(z) - (1-r)·log(1-σ(z))`, written as `softplus(z) - r·z`.
pub fn logistic_loss(logit: f64, r: f64) -> f64 {
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    softplus - r * logit
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn logistic_loss_matches_definition() {
        for &z in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            for &r in &[0.0, 1.0] {
                let s = sigmoid(z);
                let direct = -r * s.ln() - (1.0 - r) * (1.0 - s).ln();
                assert!((logistic_loss(z, r) - direct).abs() < 1e-12);
            }
        }
        assert!(logistic_loss(800.0, 0.0).is_finite());
        assert!((logistic_loss(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
