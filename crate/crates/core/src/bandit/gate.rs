//! Budgeted discovery: decide when no recalled case looks good enough and
//! the step should instead fetch a fresh ground-truth case.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ScoreBreakdown;

pub const GATE_QUEUE_LEN: usize = 16;
pub const GATE_PERCENTILE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryMetric {
    Explore,
    Exploit,
    Ucb,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryGate {
    metric: DiscoveryMetric,
    budget_fraction: f64,
    queue: VecDeque<f64>,
    used: u64,
    total: u64,
}

/// Nearest-rank percentile: the `ceil(p·n)`-th smallest value (1-based).
pub fn nearest_rank_percentile(values: impl IntoIterator<Item = f64>, p: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

impl DiscoveryGate {
    pub fn new(metric: DiscoveryMetric, budget_fraction: f64) -> Self {
        Self {
            metric,
            budget_fraction: budget_fraction.clamp(0.0, 1.0),
            queue: VecDeque::with_capacity(GATE_QUEUE_LEN),
            used: 0,
            total: 0,
        }
    }

    pub fn metric(&self) -> DiscoveryMetric {
        self.metric
    }

    pub fn budget_fraction(&self) -> f64 {
        self.budget_fraction
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn queue(&self) -> impl Iterator<Item = f64> + '_ {
        self.queue.iter().copied()
    }

    /// Seed the queue directly, oldest value first.
    pub fn with_queue(mut self, values: impl IntoIterator<Item = f64>) -> Self {
        for v in values {
            self.push(v);
        }
        self
    }

    /// Budget left when fewer than `budget_fraction` of the steps seen so far
    /// were discoveries.
    pub fn budget_available(&self) -> bool {
        (self.used as f64) < self.budget_fraction * self.total as f64
    }

    pub fn threshold(&self) -> Option<f64> {
        nearest_rank_percentile(self.queue.iter().copied(), GATE_PERCENTILE)
    }

    fn push(&mut self, v: f64) {
        if self.queue.len() == GATE_QUEUE_LEN {
            self.queue.pop_front();
        }
        self.queue.push_back(v);
    }

    /// Count a step on which there was nothing to score.
    pub fn skip(&mut self) {
        self.total += 1;
    }

    /// Decide whether this step is a discovery step, then record the
    /// observation.
    pub fn decide(&mut self, score: &ScoreBreakdown, rng: &mut impl Rng) -> bool {
        let budget = self.budget_available();
        let fire = match self.metric {
            DiscoveryMetric::Random => rng.gen_bool(self.budget_fraction) && budget,
            kind => {
                let value = match kind {
                    DiscoveryMetric::Explore => score.explore,
                    DiscoveryMetric::Exploit => score.exploit,
                    _ => score.ucb,
                };
                let fire = budget && self.threshold().is_some_and(|th| value < th);
                self.push(value);
                fire
            }
        };
        self.total += 1;
        if fire {
            self.used += 1;
        }
        fire
    }
}
