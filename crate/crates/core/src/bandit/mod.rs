//! Contextual-bandit rerankers with binary feedback.
//!
//! [`BanditPolicy`] covers the neural-linear logistic UCB policy and the
//! baselines that differ from it only in which pieces learn: a linear head on
//! fixed features, a full-gradient uncertainty model, a squared-loss head,
//! fixed similarity order, and uniform random choice.

mod checkpoint;
mod gate;
pub mod head;
pub mod theory;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use gate::{
    nearest_rank_percentile, DiscoveryGate, DiscoveryMetric, GATE_PERCENTILE, GATE_QUEUE_LEN,
};
pub use head::{fit_logistic_head, logistic_objective, logistic_objective_grad, FitOptions};
pub use theory::{theoretical_alpha, TheoryParams};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{invalid, Result};
use crate::linalg::{self, PdInverse};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Encoder features, logistic linear head, UCB on the head's design matrix.
    NeuralLinLogUcb,
    /// Logistic linear head on the raw context, no representation learning.
    LinLogUcb,
    /// Exploration from full parameter gradients; the head stays at its initial draw.
    NeuralLogUcb,
    /// Like `NeuralLinLogUcb` but the head is fitted with squared loss.
    NeuralLinUcb,
    /// Take the first recalled case (embedding similarity order).
    NpCbr,
    Random,
    /// `NeuralLinLogUcb` with the exploration bonus switched off.
    Greedy,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::NeuralLinLogUcb,
        PolicyKind::LinLogUcb,
        PolicyKind::NeuralLogUcb,
        PolicyKind::NeuralLinUcb,
        PolicyKind::NpCbr,
        PolicyKind::Random,
        PolicyKind::Greedy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::NeuralLinLogUcb => "neural_lin_log_ucb",
            PolicyKind::LinLogUcb => "lin_log_ucb",
            PolicyKind::NeuralLogUcb => "neural_log_ucb",
            PolicyKind::NeuralLinUcb => "neural_lin_ucb",
            PolicyKind::NpCbr => "np_cbr",
            PolicyKind::Random => "random",
            PolicyKind::Greedy => "greedy",
        }
    }

    /// Whether this policy updates anything from feedback.
    pub fn learns(self) -> bool {
        !matches!(self, PolicyKind::NpCbr | PolicyKind::Random)
    }

    fn uses_encoder(self) -> bool {
        matches!(
            self,
            PolicyKind::NeuralLinLogUcb
                | PolicyKind::NeuralLogUcb
                | PolicyKind::NeuralLinUcb
                | PolicyKind::Greedy
        )
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadUpdate {
    /// One gradient step per observation.
    #[default]
    Sgd,
    /// Refit the regularized logistic regression on the whole history every step.
    FullRefit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DesignMode {
    /// Accumulate each chosen feature as computed at selection time.
    #[default]
    Frozen,
    /// Rebuild the design matrix from stored inputs after every encoder update.
    Recompute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderParams {
    pub width: usize,
    pub depth: usize,
    pub output_dim: usize,
    /// Output multiplier; `√width` when absent.
    pub scale: Option<f64>,
    /// Gradient-descent step size for encoder epochs.
    pub lr: f64,
    /// Gradient steps per encoder epoch.
    pub steps: usize,
    /// Weight of `‖ω − ω₀‖²/2`; zero gives the plain epoch cross-entropy.
    pub reg_lambda: f64,
}

impl Default for EncoderParams {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 2,
            output_dim: 16,
            scale: None,
            lr: 0.03,
            steps: 10,
            reg_lambda: 0.0,
        }
    }
}

/// Hyper-parameters of a retrieval policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Exploration coefficient α.
    pub alpha: f64,
    /// When present, α follows the theoretical schedule instead of `alpha`.
    pub theory_alpha: Option<TheoryParams>,
    /// Head learning rate η.
    pub eta: f64,
    /// Design-matrix regularization λ (also the full-refit head penalty).
    pub lambda: f64,
    /// L2 strength in the per-step head update.
    pub head_lambda: f64,
    /// Encoder update interval H.
    pub interval: usize,
    /// Cases recalled by embedding similarity before reranking (K).
    pub recall_k: usize,
    /// Cases handed to the generator per step (k).
    pub top_k: usize,
    pub encoder: EncoderParams,
    pub head_update: HeadUpdate,
    pub design_mode: DesignMode,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::NeuralLinLogUcb,
            alpha: 0.1,
            theory_alpha: None,
            eta: 0.01,
            lambda: 0.1,
            head_lambda: 0.01,
            interval: 32,
            recall_k: 32,
            top_k: 1,
            encoder: EncoderParams::default(),
            head_update: HeadUpdate::Sgd,
            design_mode: DesignMode::Frozen,
        }
    }
}

impl PolicyConfig {
    pub fn with_kind(kind: PolicyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(invalid("alpha must be a nonnegative number"));
        }
        if !(self.eta > 0.0) {
            return Err(invalid("eta must be positive"));
        }
        if !(self.lambda > 0.0) {
            return Err(invalid("lambda must be positive"));
        }
        if !(self.head_lambda >= 0.0) {
            return Err(invalid("head_lambda must be nonnegative"));
        }
        if self.interval == 0 {
            return Err(invalid("interval must be positive"));
        }
        if self.recall_k == 0 || self.top_k == 0 {
            return Err(invalid("recall_k and top_k must be positive"));
        }
        if self.top_k > self.recall_k {
            return Err(invalid("top_k cannot exceed recall_k"));
        }
        if self.encoder.steps == 0 || !(self.encoder.lr > 0.0) {
            return Err(invalid("encoder lr and steps must be positive"));
        }
        if let Some(p) = &self.theory_alpha {
            p.validate()?;
        }
        Ok(())
    }
}

/// The two terms of the UCB score and their combination.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    /// `θᵀ f(x; ω)`.
    pub exploit: f64,
    /// `‖u(x)‖_{A⁻¹}`, where `u` is the uncertainty feature.
    pub explore: f64,
    /// `exploit + α·explore`.
    pub ucb: f64,
}

/// How raw contexts become head features.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Encoder(Encoder),
    /// Contexts are used as features unchanged.
    Identity {
        dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HistoryItem {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub r: f64,
}

/// Mutable state of one retrieval policy.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditPolicy {
    config: PolicyConfig,
    features: FeatureMap,
    theta: Vec<f64>,
    design: PdInverse,
    epoch_buffer: Vec<(Vec<f64>, f64)>,
    history: Vec<HistoryItem>,
    t: u64,
}

fn gaussian_head(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, Stream::Init, 1);
    let n = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("finite std");
    (0..dim).map(|_| n.sample(&mut rng)).collect()
}

impl BanditPolicy {
    /// Fresh policy for contexts of dimension `input_dim`. The encoder uses the
    /// block-symmetric initialization and the head is drawn from `N(0, 1/d)`.
    pub fn new(config: PolicyConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(invalid("context dimension must be positive"));
        }
        let (features, head_dim, design_dim) = if config.kind.uses_encoder() {
            let enc_seed = crate::rng::derive_seed(seed, Stream::Init, 0);
            let mut ecfg = EncoderConfig::new(
                input_dim,
                config.encoder.width,
                config.encoder.depth,
                config.encoder.output_dim,
                enc_seed,
            );
            if let Some(s) = config.encoder.scale {
                ecfg = ecfg.with_scale(s);
            }
            let enc = Encoder::init_symmetric(ecfg)?;
            let d = enc.output_dim();
            let design_dim = if config.kind == PolicyKind::NeuralLogUcb {
                enc.param_count()
            } else {
                d
            };
            (FeatureMap::Encoder(enc), d, design_dim)
        } else {
            (
                FeatureMap::Identity { dim: input_dim },
                input_dim,
                input_dim,
            )
        };
        let theta = gaussian_head(head_dim, seed);
        let design = PdInverse::new(design_dim, config.lambda)?;
        Ok(Self {
            config,
            features,
            theta,
            design,
            epoch_buffer: Vec::new(),
            history: Vec::new(),
            t: 0,
        })
    }

    /// Policy with explicit features, head and design (for hand-built cases).
    pub fn from_parts(
        config: PolicyConfig,
        features: FeatureMap,
        theta: Vec<f64>,
        design: PdInverse,
    ) -> Result<Self> {
        config.validate()?;
        let head_dim = match &features {
            FeatureMap::Encoder(e) => e.output_dim(),
            FeatureMap::Identity { dim } => *dim,
        };
        if theta.len() != head_dim {
            return Err(invalid("head dimension does not match the feature map"));
        }
        let want = match (&features, config.kind) {
            (FeatureMap::Encoder(e), PolicyKind::NeuralLogUcb) => e.param_count(),
            _ => head_dim,
        };
        if design.dim() != want {
            return Err(invalid("design dimension does not match the feature map"));
        }
        Ok(Self {
            config,
            features,
            theta,
            design,
            epoch_buffer: Vec::new(),
            history: Vec::new(),
            t: 0,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.config.kind
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn design(&self) -> &PdInverse {
        &self.design
    }

    #[doc(hidden)]
    pub fn design_mut(&mut self) -> &mut PdInverse {
        &mut self.design
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        match &self.features {
            FeatureMap::Encoder(e) => Some(e),
            FeatureMap::Identity { .. } => None,
        }
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.features
    }

    pub fn input_dim(&self) -> usize {
        match &self.features {
            FeatureMap::Encoder(e) => e.input_dim(),
            FeatureMap::Identity { dim } => *dim,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn epoch_buffer(&self) -> &[(Vec<f64>, f64)] {
        &self.epoch_buffer
    }

    /// Exploration coefficient used at the next selection.
    pub fn current_alpha(&self) -> Result<f64> {
        if self.config.kind == PolicyKind::Greedy {
            return Ok(0.0);
        }
        match &self.config.theory_alpha {
            Some(p) => theoretical_alpha(self.t + 1, p),
            None => Ok(self.config.alpha),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(invalid(format!(
                "context has dimension {}, policy expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Head feature `z` and uncertainty feature `u` of a context.
    fn featurize(&self, x: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        self.check_input(x)?;
        match &self.features {
            FeatureMap::Identity { .. } => Ok((x.to_vec(), None)),
            FeatureMap::Encoder(enc) => {
                let cache = enc.forward_cached(x)?;
                let z = cache.output().to_vec();
                if self.config.kind == PolicyKind::NeuralLogUcb {
                    let inv_sqrt_m = 1.0 / (enc.config().width as f64).sqrt();
                    let mut g = enc.vjp(&cache, &self.theta);
                    g.iter_mut().for_each(|v| *v *= inv_sqrt_m);
                    Ok((z, Some(g)))
                } else {
                    Ok((z, None))
                }
            }
        }
    }

    /// Head feature `f(x; ω)` (or `x` itself for fixed-feature policies).
    pub fn feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.featurize(x)?.0)
    }

    fn score_with_alpha(&self, x: &[f64], alpha: f64) -> Result<ScoreBreakdown> {
        if !self.config.kind.learns() {
            self.check_input(x)?;
            return Ok(ScoreBreakdown::default());
        }
        let (z, u) = self.featurize(x)?;
        let exploit = linalg::dot(&self.theta, &z);
        let explore = self.design.mahalanobis(u.as_deref().unwrap_or(&z))?;
        Ok(ScoreBreakdown {
            exploit,
            explore,
            ucb: exploit + alpha * explore,
        })
    }

    /// UCB breakdown for one context.
    pub fn score(&self, x: &[f64]) -> Result<ScoreBreakdown> {
        self.score_with_alpha(x, self.current_alpha()?)
    }

    pub fn score_all(&self, candidates: &[Vec<f64>]) -> Result<Vec<ScoreBreakdown>> {
        let alpha = self.current_alpha()?;
        candidates
            .iter()
            .map(|x| self.score_with_alpha(x, alpha))
            .collect()
    }

    /// Pick one candidate: UCB argmax (lowest index on ties), the first
    /// candidate for similarity order, or a uniform draw for `Random`.
    pub fn select(
        &self,
        candidates: &[Vec<f64>],
        rng: &mut impl Rng,
    ) -> Result<(usize, ScoreBreakdown)> {
        if candidates.is_empty() {
            return Err(invalid("cannot select from an empty candidate list"));
        }
        let scores = self.score_all(candidates)?;
        let idx = match self.config.kind {
            PolicyKind::NpCbr => 0,
            PolicyKind::Random => rng.gen_range(0..candidates.len()),
            _ => argmax_ucb(&scores),
        };
        Ok((idx, scores[idx]))
    }

    /// `k` distinct indices ordered by descending UCB, ties by ascending index.
    pub fn select_top_k(
        &self,
        candidates: &[Vec<f64>],
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        if k == 0 || k > candidates.len() {
            return Err(invalid(format!(
                "k = {k} must be between 1 and the {} candidates",
                candidates.len()
            )));
        }
        let scores = self.score_all(candidates)?;
        Ok(match self.config.kind {
            PolicyKind::NpCbr => (0..k).collect(),
            PolicyKind::Random => {
                let mut idx: Vec<usize> = (0..candidates.len()).collect();
                idx.partial_shuffle(rng, k);
                idx.truncate(k);
                idx
            }
            _ => top_k_by_ucb(&scores, k),
        })
    }

    /// Record the reward of a chosen context: head step, design update,
    /// epoch buffer, step counter.
    pub fn observe(&mut self, x: &[f64], r: f64) -> Result<()> {
        head::check_reward(r)?;
        self.check_input(x)?;
        self.t += 1;
        if !self.config.kind.learns() {
            return Ok(());
        }
        let (z, u) = self.featurize(x)?;
        let cfg = &self.config;
        match cfg.kind {
            PolicyKind::NeuralLogUcb => {}
            PolicyKind::NeuralLinUcb => {
                head::squared_sgd_step(&mut self.theta, &z, r, cfg.eta, cfg.head_lambda)?
            }
            _ => match cfg.head_update {
                HeadUpdate::Sgd => {
                    head::logistic_sgd_step(&mut self.theta, &z, r, cfg.eta, cfg.head_lambda)?
                }
                HeadUpdate::FullRefit => {}
            },
        }
        self.design.rank_one_update(u.as_deref().unwrap_or(&z))?;
        let keep_history =
            cfg.head_update == HeadUpdate::FullRefit || cfg.design_mode == DesignMode::Recompute;
        if keep_history {
            self.history.push(HistoryItem {
                x: x.to_vec(),
                z,
                r,
            });
        }
        if cfg.head_update == HeadUpdate::FullRefit && cfg.kind != PolicyKind::NeuralLogUcb {
            self.refit_head()?;
        }
        if matches!(self.features, FeatureMap::Encoder(_)) {
            self.epoch_buffer.push((x.to_vec(), r));
        }
        Ok(())
    }

    fn refit_head(&mut self) -> Result<()> {
        let data: Vec<(Vec<f64>, f64)> = self.history.iter().map(|h| (h.z.clone(), h.r)).collect();
        self.theta = fit_logistic_head(
            &data,
            self.config.lambda,
            Some(&self.theta),
            FitOptions::default(),
        )?;
        Ok(())
    }

    /// Train the encoder on the buffered epoch when `t` is a multiple of the
    /// interval. The head is held fixed during and after the update. Returns
    /// whether an update happened.
    pub fn update_encoder_if_due(&mut self) -> Result<bool> {
        let interval = self.config.interval as u64;
        if self.t == 0 || !self.t.is_multiple_of(interval) || self.epoch_buffer.is_empty() {
            return Ok(false);
        }
        let FeatureMap::Encoder(enc) = &mut self.features else {
            return Ok(false);
        };
        let p = &self.config.encoder;
        enc.epoch_update(&self.theta, &self.epoch_buffer, p.lr, p.reg_lambda, p.steps)?;
        self.epoch_buffer.clear();
        if self.config.design_mode == DesignMode::Recompute {
            self.recompute_design()?;
        }
        Ok(true)
    }

    fn recompute_design(&mut self) -> Result<()> {
        let mut design = PdInverse::new(self.design.dim(), self.config.lambda)?;
        let mut items = std::mem::take(&mut self.history);
        for item in &mut items {
            let (z, u) = self.featurize(&item.x)?;
            design.rank_one_update(u.as_deref().unwrap_or(&z))?;
            item.z = z;
        }
        self.history = items;
        self.design = design;
        Ok(())
    }
}

fn argmax_ucb(scores: &[ScoreBreakdown]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.ucb > scores[best].ucb {
            best = i;
        }
    }
    best
}

fn top_k_by_ucb(scores: &[ScoreBreakdown], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].ucb.total_cmp(&scores[a].ucb).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
