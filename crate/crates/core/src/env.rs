//! Synthetic environments with oracle access to the true expected utility.
//!
//! [`CoverageEnv`] models retrieval-augmented generation: a query succeeds
//! with a probability that decays with its distance to the retrieved case's
//! query. [`LatentArmEnv`] is a plain logistic contextual bandit whose reward
//! model is a hidden random network.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::casebank::{Case, CaseBank};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sigmoid;

/// Serialize a point as a case payload.
pub fn encode_point(p: &[f64]) -> String {
    p.iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn decode_point(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::DataCorruption(format!("undecodable query payload {s:?}: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageConfig {
    /// Query dimension, which is also the intrinsic dimension of the query law.
    pub query_dim: usize,
    /// Lipschitz constant of the utility in the query distance.
    pub lipschitz: f64,
    /// Success floor for any case, including none.
    pub p_min: f64,
    /// Fraction of query coordinates hidden from the recall embedding.
    pub embed_noise: f64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            query_dim: 2,
            lipschitz: 2.0,
            p_min: 0.1,
            embed_noise: 0.0,
        }
    }
}

/// Queries are uniform on `[0,1]^d`. Retrieving the case of query `q_c` for
/// query `q` succeeds with probability `clamp(1 − L·‖q − q_c‖, p_min, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageEnv {
    config: CoverageConfig,
    seed: u64,
}

impl CoverageEnv {
    pub fn new(config: CoverageConfig, seed: u64) -> Result<Self> {
        if config.query_dim == 0 {
            return Err(invalid("query dimension must be positive"));
        }
        if !(config.lipschitz > 0.0) {
            return Err(invalid("lipschitz constant must be positive"));
        }
        if !(config.p_min > 0.0 && config.p_min < 1.0) {
            return Err(invalid("p_min must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&config.embed_noise) {
            return Err(invalid("embed_noise must lie in [0, 1)"));
        }
        Ok(Self { config, seed })
    }

    pub fn config(&self) -> &CoverageConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn p_min(&self) -> f64 {
        self.config.p_min
    }

    /// Dimension of the recall embedding.
    pub fn embedding_dim(&self) -> usize {
        self.config.query_dim
    }

    /// Dimension of the reranker's view of one query.
    pub fn content_dim(&self) -> usize {
        self.config.query_dim + 1
    }

    /// Number of trailing coordinates masked out of the recall embedding.
    pub fn hidden_coords(&self) -> usize {
        let d = self.config.query_dim;
        ((self.config.embed_noise * d as f64).ceil() as usize).min(d - 1)
    }

    pub fn sample_query(&self, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let q: Vec<f64> = (0..self.config.query_dim)
            .map(|_| rng.gen::<f64>())
            .collect();
        let emb = self.observable_embedding(&q);
        (q, emb)
    }

    /// Query for step `t`, drawn from its own counter-derived stream.
    pub fn query_at(&self, t: u64) -> (Vec<f64>, Vec<f64>) {
        self.sample_query(&mut stream_rng(self.seed, Stream::Query, t))
    }

    /// The query with its last hidden coordinates zeroed, scaled to unit norm.
    pub fn observable_embedding(&self, q: &[f64]) -> Vec<f64> {
        let keep = q.len() - self.hidden_coords();
        let mut e: Vec<f64> = q
            .iter()
            .enumerate()
            .map(|(i, &v)| if i < keep { v } else { 0.0 })
            .collect();
        let n = linalg::norm(&e);
        if n > 0.0 {
            e.iter_mut().for_each(|v| *v /= n);
        } else {
            // A zero observable part carries no direction; use the first axis.
            e[0] = 1.0;
        }
        e
    }

    /// Injective unit-norm view of a query used as reranker input: the
    /// centred query scaled by `2/√d` (so the cube fills the unit ball), plus
    /// one coordinate that completes the norm to 1. Differences between queries stay linear in the first `d`
    /// coordinates.
    pub fn content_embedding(&self, q: &[f64]) -> Vec<f64> {
        let s = 2.0 / (q.len() as f64).sqrt();
        let mut c: Vec<f64> = q.iter().map(|v| (v - 0.5) * s).collect();
        let r2 = linalg::dot(&c, &c);
        c.push((1.0 - r2).max(0.0).sqrt());
        c
    }

    /// `clamp(1 − L·‖q − q_c‖, p_min, 1)`.
    pub fn utility_between(&self, q: &[f64], qc: &[f64]) -> f64 {
        let dist: f64 = q
            .iter()
            .zip(qc)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        (1.0 - self.config.lipschitz * dist).clamp(self.config.p_min, 1.0)
    }

    /// Expected utility of generating with `case`; with no case the generator
    /// works zero-shot and succeeds with `p_min`.
    pub fn expected_utility(&self, q: &[f64], case: Option<&Case>) -> Result<f64> {
        match case {
            None => Ok(self.config.p_min),
            Some(c) => {
                let qc = decode_point(&c.query)?;
                if qc.len() != q.len() {
                    return Err(Error::DataCorruption(format!(
                        "case {} stores a {}-dimensional query",
                        c.id,
                        qc.len()
                    )));
                }
                Ok(self.utility_between(q, &qc))
            }
        }
    }

    /// Bernoulli draw with success probability `p`.
    pub fn bernoulli(p: f64, rng: &mut impl Rng) -> u8 {
        (rng.gen::<f64>() < p) as u8
    }

    /// Reward for step `t` given the expected utility of what was retrieved.
    pub fn reward_at(&self, t: u64, utility: f64) -> u8 {
        Self::bernoulli(utility, &mut stream_rng(self.seed, Stream::Reward, t))
    }

    pub fn step(&self, q: &[f64], case: Option<&Case>, rng: &mut impl Rng) -> Result<u8> {
        let u = self.expected_utility(q, case)?;
        Ok(Self::bernoulli(u, rng))
    }

    /// Coverage gap and best achievable utility over a set of stored queries
    /// (the no-case floor included).
    pub fn oracle_terms_points<'a>(
        &self,
        q: &[f64],
        points: impl IntoIterator<Item = &'a [f64]>,
    ) -> (f64, f64) {
        let best = points
            .into_iter()
            .map(|p| self.utility_between(q, p))
            .fold(self.config.p_min, f64::max);
        (1.0 - best, best)
    }

    /// Coverage gap `1 − best` and the best utility over the whole bank.
    pub fn oracle_terms(&self, q: &[f64], bank: &CaseBank) -> Result<(f64, f64)> {
        let mut best = self.config.p_min;
        for c in bank.cases() {
            best = best.max(self.expected_utility(q, Some(c))?);
        }
        Ok((1.0 - best, best))
    }
}

/// Stand-in for a frozen generator: succeeds with exactly the expected
/// utility of the retrieved cases and echoes the query as its solution.
#[derive(Debug, Clone)]
pub struct MockGenerator<'a> {
    env: &'a CoverageEnv,
}

impl<'a> MockGenerator<'a> {
    pub fn new(env: &'a CoverageEnv) -> Self {
        Self { env }
    }

    /// Utility of conditioning on several cases: the best of them, or the
    /// zero-shot floor when there are none.
    pub fn set_utility(&self, q: &[f64], case_queries: &[&[f64]]) -> f64 {
        case_queries
            .iter()
            .map(|qc| self.env.utility_between(q, qc))
            .fold(self.env.p_min(), f64::max)
    }

    pub fn generate(&self, q: &[f64], case_queries: &[&[f64]], t: u64) -> (String, u8, f64) {
        let u = self.set_utility(q, case_queries);
        let r = self.env.reward_at(t, u);
        (format!("solution[{}]", encode_point(q)), r, u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HiddenInit {
    /// Independent Gaussian weights; arms have distinct success probabilities.
    #[default]
    Independent,
    /// Block-symmetric weights; every duplicated-half context scores exactly 0.5.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    /// Context dimension (even; the second half duplicates the first).
    pub feature_dim: usize,
    pub arms: usize,
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub hidden_output_dim: usize,
    /// `‖θ*‖₂`.
    pub head_norm: f64,
    pub hidden_init: HiddenInit,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            arms: 10,
            hidden_width: 16,
            hidden_depth: 2,
            hidden_output_dim: 4,
            head_norm: 2.0,
            hidden_init: HiddenInit::Independent,
        }
    }
}

/// Logistic bandit with reward probability `σ(θ*ᵀ f*(x))` for a hidden
/// network `f*` and head `θ*`.
#[derive(Debug, Clone)]
pub struct LatentArmEnv {
    config: LatentConfig,
    hidden: Encoder,
    theta_star: Vec<f64>,
    seed: u64,
}

impl LatentArmEnv {
    pub fn new(config: LatentConfig, seed: u64) -> Result<Self> {
        if config.arms == 0 {
            return Err(invalid("need at least one arm"));
        }
        let ecfg = EncoderConfig::new(
            config.feature_dim,
            config.hidden_width,
            config.hidden_depth,
            config.hidden_output_dim,
            derive_seed(seed, Stream::Env, 0),
        );
        let hidden = match config.hidden_init {
            HiddenInit::Independent => Encoder::init_independent(ecfg)?,
            HiddenInit::Symmetric => Encoder::init_symmetric(ecfg)?,
        };
        let mut rng = stream_rng(seed, Stream::Env, 1);
        let mut theta: Vec<f64> = (0..config.hidden_output_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let n = linalg::norm(&theta);
        theta.iter_mut().for_each(|v| *v *= config.head_norm / n);
        Ok(Self {
            config,
            hidden,
            theta_star: theta,
            seed,
        })
    }

    pub fn with_head(mut self, theta_star: Vec<f64>) -> Result<Self> {
        if theta_star.len() != self.config.hidden_output_dim {
            return Err(invalid("head dimension mismatch"));
        }
        self.theta_star = theta_star;
        Ok(self)
    }

    pub fn config(&self) -> &LatentConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn hidden(&self) -> &Encoder {
        &self.hidden
    }

    pub fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    /// `K` contexts for step `t`: uniform directions in `d/2` dimensions,
    /// duplicated and scaled by `1/√2`.
    pub fn latent_contexts(&self, t: u64) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(self.seed, Stream::Context, t);
        let half = self.config.feature_dim / 2;
        (0..self.config.arms)
            .map(|_| {
                let mut v: Vec<f64> = (0..half).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = linalg::norm(&v);
                let s = 1.0 / (n * std::f64::consts::SQRT_2);
                v.iter_mut().for_each(|a| *a *= s);
                let copy = v.clone();
                v.extend_from_slice(&copy);
                v
            })
            .collect()
    }

    /// `σ(θ*ᵀ f*(x))`.
    pub fn latent_truth(&self, x: &[f64]) -> Result<f64> {
        let f = self.hidden.forward(x)?;
        Ok(sigmoid(linalg::dot(&self.theta_star, &f)))
    }

    pub fn reward_at(&self, t: u64, p: f64) -> u8 {
        CoverageEnv::bernoulli(p, &mut stream_rng(self.seed, Stream::Reward, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env(noise: f64) -> CoverageEnv {
        CoverageEnv::new(
            CoverageConfig {
                embed_noise: noise,
                ..CoverageConfig::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn faithful_embedding_is_normalized_query() {
        let e = env(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, emb) = e.sample_query(&mut rng);
        let n = linalg::norm(&q);
        for (a, b) in emb.iter().zip(&q) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_embedding_zeroes_tail() {
        let e = env(0.5);
        let (_, emb) = e.query_at(1);
        assert_eq!(emb[1], 0.0);
        assert!((linalg::norm(&emb) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn utility_examples() {
        let e = env(0.0);
        let q = [0.3, 0.4];
        assert_eq!(e.utility_between(&q, &q), 1.0);
        assert_eq!(e.utility_between(&q, &[0.3, 0.95]), 0.1);
        let u = e.utility_between(&[0.0, 0.0], &[0.12, 0.16]);
        assert!((u - 0.6).abs() < 1e-12);
        assert_eq!(e.expected_utility(&q, None).unwrap(), 0.1);
    }

    #[test]
    fn corrupt_payload_is_reported() {
        let e = env(0.0);
        let mut bank = CaseBank::new(2).unwrap();
        bank.retain("not,a,number", "", 1, &[1.0, 0.0], 0).unwrap();
        assert!(matches!(
            e.expected_utility(&[0.1, 0.1], Some(&bank.cases()[0])),
            Err(Error::DataCorruption(_))
        ));
    }

    #[test]
    fn oracle_terms_examples() {
        let e = env(0.0);
        let q = [0.2, 0.7];
        let empty = CaseBank::new(2).unwrap();
        let (d, b) = e.oracle_terms(&q, &empty).unwrap();
        assert!((d - 0.9).abs() < 1e-15);
        assert_eq!(b, 0.1);
        let mut bank = CaseBank::new(2).unwrap();
        let pts = [[0.9, 0.9], [0.25, 0.7], [0.2, 0.72]];
        for p in &pts {
            bank.retain(encode_point(p), "", 1, &e.observable_embedding(p), 0)
                .unwrap();
        }
        let (d, b) = e.oracle_terms(&q, &bank).unwrap();
        let brute = pts
            .iter()
            .map(|p| e.utility_between(&q, p))
            .fold(0.1, f64::max);
        assert_eq!(b, brute);
        assert_eq!(d, 1.0 - brute);
        bank.retain(encode_point(&q), "", 1, &e.observable_embedding(&q), 1)
            .unwrap();
        assert_eq!(e.oracle_terms(&q, &bank).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn point_payload_round_trips() {
        let p = [0.1, 1.0 / 3.0, 2e-300];
        assert_eq!(decode_point(&encode_point(&p)).unwrap(), p.to_vec());
    }

    #[test]
    fn certain_success_always_rewards() {
        let e = env(0.0);
        for t in 0..100 {
            assert_eq!(e.reward_at(t, 1.0), 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = [0.5, 0.5];
        let mut bank = CaseBank::new(2).unwrap();
        bank.retain(encode_point(&q), "", 1, &e.observable_embedding(&q), 0)
            .unwrap();
        assert_eq!(e.step(&q, Some(&bank.cases()[0]), &mut rng).unwrap(), 1);
    }

    #[test]
    fn content_embedding_is_unit_and_injective() {
        let e = env(0.0);
        let a = e.content_embedding(&[0.2, 0.9]);
        let b = e.content_embedding(&[0.9, 0.2]);
        assert!((linalg::norm(&a) - 1.0).abs() < 1e-12);
        assert_ne!(a, b);
        assert_eq!(a.len(), e.content_dim());
    }

    #[test]
    fn latent_contexts_follow_assumption() {
        let env = LatentArmEnv::new(LatentConfig::default(), 4).unwrap();
        let xs = env.latent_contexts(1);
        assert_eq!(xs.len(), 10);
        for x in &xs {
            assert_eq!(&x[..4], &x[4..]);
            assert!((linalg::norm(x) - 1.0).abs() < 1e-12);
        }
        assert_ne!(env.latent_contexts(2), xs);
        assert_eq!(env.latent_contexts(1), xs);
        let single = LatentArmEnv::new(
            LatentConfig {
                arms: 1,
                ..LatentConfig::default()
            },
            4,
        )
        .unwrap();
        assert_eq!(single.latent_contexts(1).len(), 1);
    }

    #[test]
    fn latent_truth_special_cases() {
        let sym = LatentArmEnv::new(
            LatentConfig {
                hidden_init: HiddenInit::Symmetric,
                ..LatentConfig::default()
            },
            1,
        )
        .unwrap();
        for x in sym.latent_contexts(3) {
            assert_eq!(sym.latent_truth(&x).unwrap(), 0.5);
        }
        let zero = LatentArmEnv::new(LatentConfig::default(), 1)
            .unwrap()
            .with_head(vec![0.0; 4])
            .unwrap();
        for x in zero.latent_contexts(3) {
            assert_eq!(zero.latent_truth(&x).unwrap(), 0.5);
        }
        let env = LatentArmEnv::new(LatentConfig::default(), 1).unwrap();
        let truths: Vec<f64> = env
            .latent_contexts(5)
            .iter()
            .map(|x| env.latent_truth(x).unwrap())
            .collect();
        assert!(truths.iter().any(|&p| (p - 0.5).abs() > 1e-3));
    }
}
