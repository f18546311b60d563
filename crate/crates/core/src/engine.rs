//! The online loop: recall, rerank, generate, learn, retain, and record the
//! oracle regret terms of every step.

use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::bandit::{BanditPolicy, DiscoveryGate, ScoreBreakdown};
use crate::casebank::{context_features, CaseBank};
use crate::env::{encode_point, CoverageEnv, LatentArmEnv, MockGenerator};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream_rng, Stream};

/// Tolerance of the per-step identity `Δ + ρ = 1 − chosen_utility`.
pub const IDENTITY_TOL: f64 = 1e-9;

/// Column order of trace CSV files.
pub const TRACE_COLUMNS: [&str; 14] = [
    "t",
    "query_id",
    "candidate_ids",
    "chosen_id",
    "exploit",
    "explore",
    "ucb",
    "reward",
    "oracle_delta",
    "oracle_rho",
    "oracle_rho_pool",
    "chosen_utility",
    "bank_size_after",
    "discovery",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Coverage,
    Latent,
}

#[derive(Debug, Clone)]
pub enum Environment {
    Coverage(CoverageEnv),
    Latent(LatentArmEnv),
}

impl Environment {
    pub fn kind(&self) -> EnvKind {
        match self {
            Environment::Coverage(_) => EnvKind::Coverage,
            Environment::Latent(_) => EnvKind::Latent,
        }
    }

    /// Dimension of the reranker contexts this environment produces.
    pub fn context_dim(&self) -> usize {
        match self {
            Environment::Coverage(e) => 4 * e.content_dim(),
            Environment::Latent(e) => e.feature_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: u64,
    pub query_id: u64,
    pub candidate_ids: Vec<u64>,
    /// Selected case ids, best first; empty when nothing was retrieved.
    pub chosen_ids: Vec<u64>,
    pub score: ScoreBreakdown,
    pub reward: u8,
    /// Coverage gap against the whole bank.
    pub oracle_delta: f64,
    /// Retrieval regret against the best case in the bank.
    pub oracle_rho: f64,
    /// Retrieval regret against the best recalled candidate.
    pub oracle_rho_pool: f64,
    pub chosen_utility: f64,
    pub bank_size_after: usize,
    pub discovery: bool,
}

impl StepRecord {
    pub fn chosen_id(&self) -> Option<u64> {
        self.chosen_ids.first().copied()
    }
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub env: EnvKind,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub wall_time: Duration,
}

/// Step-by-step driver. Keeps its records so a failure mid-run still leaves
/// a usable partial trace.
pub struct Runner<'e> {
    env: &'e Environment,
    policy: BanditPolicy,
    gate: Option<DiscoveryGate>,
    bank: CaseBank,
    /// Decoded query of every case, indexed by case id.
    points: Vec<Vec<f64>>,
    /// Reranker view of every case, indexed by case id.
    contents: Vec<Vec<f64>>,
    seed: u64,
    records: Vec<StepRecord>,
    started: Instant,
}

impl<'e> Runner<'e> {
    pub fn new(
        env: &'e Environment,
        policy: BanditPolicy,
        gate: Option<DiscoveryGate>,
        seed: u64,
    ) -> Result<Self> {
        if policy.input_dim() != env.context_dim() {
            return Err(Error::Config {
                path: "policy".into(),
                msg: format!(
                    "policy expects {}-dimensional contexts but the environment produces {}",
                    policy.input_dim(),
                    env.context_dim()
                ),
            });
        }
        let bank_dim = match env {
            Environment::Coverage(e) => e.embedding_dim(),
            Environment::Latent(_) => {
                if gate.is_some() {
                    return Err(Error::Config {
                        path: "discovery".into(),
                        msg: "discovery needs a case bank; the latent environment has none".into(),
                    });
                }
                1
            }
        };
        Ok(Self {
            env,
            policy,
            gate,
            bank: CaseBank::new(bank_dim)?,
            points: Vec::new(),
            contents: Vec::new(),
            seed,
            records: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn policy(&self) -> &BanditPolicy {
        &self.policy
    }

    pub fn bank(&self) -> &CaseBank {
        &self.bank
    }

    pub fn gate(&self) -> Option<&DiscoveryGate> {
        self.gate.as_ref()
    }

    /// Run one step and return its record.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let t = self.records.len() as u64 + 1;
        let env = self.env;
        let rec = match env {
            Environment::Coverage(env) => self.coverage_step(env, t)?,
            Environment::Latent(env) => self.latent_step(env, t)?,
        };
        self.records.push(rec);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn finish(self) -> (RunTrace, BanditPolicy, CaseBank) {
        let trace = RunTrace {
            env: self.env.kind(),
            seed: self.seed,
            records: self.records,
            wall_time: self.started.elapsed(),
        };
        (trace, self.policy, self.bank)
    }

    /// Partial trace of the steps completed so far.
    pub fn snapshot(&self) -> RunTrace {
        RunTrace {
            env: self.env.kind(),
            seed: self.seed,
            records: self.records.clone(),
            wall_time: self.started.elapsed(),
        }
    }

    fn retain(
        &mut self,
        env: &CoverageEnv,
        q: &[f64],
        emb: &[f64],
        solution: String,
        r: u8,
        t: u64,
    ) -> Result<()> {
        if self
            .bank
            .retain(encode_point(q), solution, r, emb, t)?
            .is_some()
        {
            self.points.push(q.to_vec());
            self.contents.push(env.content_embedding(q));
        }
        Ok(())
    }

    fn learn(&mut self, xs: &[&[f64]], r: u8) -> Result<()> {
        for x in xs {
            self.policy.observe(x, f64::from(r))?;
            self.policy.update_encoder_if_due()?;
        }
        Ok(())
    }

    fn coverage_step(&mut self, env: &CoverageEnv, t: u64) -> Result<StepRecord> {
        let (q, emb) = env.query_at(t);
        let cfg = self.policy.config();
        let (recall_k, top_k) = (cfg.recall_k, cfg.top_k);
        let pool: Vec<u64> = if self.bank.is_empty() {
            Vec::new()
        } else {
            self.bank
                .recall(&emb, recall_k)?
                .iter()
                .map(|c| c.id)
                .collect()
        };
        let content_q = env.content_embedding(&q);
        let xs = pool
            .iter()
            .map(|&id| context_features(&content_q, &self.contents[id as usize]))
            .collect::<Result<Vec<_>>>()?;

        let mut rng = stream_rng(self.seed, Stream::Policy, t);
        let (chosen, score) = if pool.is_empty() {
            (Vec::new(), ScoreBreakdown::default())
        } else if top_k <= 1 {
            let (i, s) = self.policy.select(&xs, &mut rng)?;
            (vec![i], s)
        } else {
            let idx = self
                .policy
                .select_top_k(&xs, top_k.min(xs.len()), &mut rng)?;
            let s = self.policy.score(&xs[idx[0]])?;
            (idx, s)
        };

        let discovery = match self.gate.as_mut() {
            None => false,
            Some(g) if pool.is_empty() => {
                g.skip();
                false
            }
            Some(g) => g.decide(&score, &mut stream_rng(self.seed, Stream::Gate, t)),
        };

        if discovery {
            // The revealed ground truth is a case that matches this query exactly.
            self.retain(env, &q, &emb, format!("oracle[{}]", encode_point(&q)), 1, t)?;
            let id = self.bank.len() as u64 - 1;
            return Ok(StepRecord {
                t,
                query_id: t,
                candidate_ids: pool,
                chosen_ids: vec![id],
                score,
                reward: 1,
                oracle_delta: 0.0,
                oracle_rho: 0.0,
                oracle_rho_pool: 0.0,
                chosen_utility: 1.0,
                bank_size_after: self.bank.len(),
                discovery: true,
            });
        }

        let chosen_ids: Vec<u64> = chosen.iter().map(|&i| pool[i]).collect();
        let chosen_pts: Vec<&[f64]> = chosen_ids
            .iter()
            .map(|&id| self.points[id as usize].as_slice())
            .collect();
        let (solution, reward, utility) = MockGenerator::new(env).generate(&q, &chosen_pts, t);
        let (delta, best) = env.oracle_terms_points(&q, self.points.iter().map(Vec::as_slice));
        let (_, pool_best) = env.oracle_terms_points(
            &q,
            pool.iter().map(|&id| self.points[id as usize].as_slice()),
        );
        let rho = best - utility;
        if (delta + rho - (1.0 - utility)).abs() > IDENTITY_TOL || rho < -1e-12 {
            return Err(Error::InternalConsistency(format!(
                "step {t}: delta {delta} + rho {rho} does not match 1 - {utility}"
            )));
        }

        let chosen_xs: Vec<Vec<f64>> = chosen.iter().map(|&i| xs[i].clone()).collect();
        let refs: Vec<&[f64]> = chosen_xs.iter().map(Vec::as_slice).collect();
        self.learn(&refs, reward)?;
        self.retain(env, &q, &emb, solution, reward, t)?;

        Ok(StepRecord {
            t,
            query_id: t,
            candidate_ids: pool,
            chosen_ids,
            score,
            reward,
            oracle_delta: delta,
            oracle_rho: rho,
            oracle_rho_pool: pool_best - utility,
            chosen_utility: utility,
            bank_size_after: self.bank.len(),
            discovery: false,
        })
    }

    fn latent_step(&mut self, env: &LatentArmEnv, t: u64) -> Result<StepRecord> {
        let xs = env.latent_contexts(t);
        let truths = xs
            .iter()
            .map(|x| env.latent_truth(x))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = stream_rng(self.seed, Stream::Policy, t);
        let (i, score) = self.policy.select(&xs, &mut rng)?;
        let best = truths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let reward = env.reward_at(t, truths[i]);
        self.learn(&[xs[i].as_slice()], reward)?;
        Ok(StepRecord {
            t,
            query_id: t,
            candidate_ids: (0..xs.len() as u64).collect(),
            chosen_ids: vec![i as u64],
            score,
            reward,
            oracle_delta: 0.0,
            oracle_rho: best - truths[i],
            oracle_rho_pool: best - truths[i],
            chosen_utility: truths[i],
            bank_size_after: 0,
            discovery: false,
        })
    }
}

/// Run `horizon` steps and return the trace, the trained policy and the bank.
pub fn run_full(
    env: &Environment,
    policy: BanditPolicy,
    gate: Option<DiscoveryGate>,
    horizon: u64,
    seed: u64,
) -> Result<(RunTrace, BanditPolicy, CaseBank)> {
    if horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    let mut runner = Runner::new(env, policy, gate, seed)?;
    for _ in 0..horizon {
        runner.step()?;
    }
    Ok(runner.finish())
}

pub fn run(
    env: &Environment,
    policy: BanditPolicy,
    gate: Option<DiscoveryGate>,
    horizon: u64,
    seed: u64,
) -> Result<RunTrace> {
    Ok(run_full(env, policy, gate, horizon, seed)?.0)
}

/// Per-step regret increments: `1 − chosen_utility` for the coverage
/// environment, `best − chosen` truth for the latent one.
pub fn regret_increments(trace: &RunTrace) -> impl Iterator<Item = f64> + '_ {
    trace.records.iter().map(move |r| match trace.env {
        EnvKind::Coverage => 1.0 - r.chosen_utility,
        EnvKind::Latent => r.oracle_rho,
    })
}

/// Cumulative pseudo-regret `R_t` for `t = 1..T`.
pub fn pseudo_regret(trace: &RunTrace) -> Vec<f64> {
    let mut acc = 0.0;
    regret_increments(trace)
        .map(|d| {
            acc += d;
            acc
        })
        .collect()
}

/// `(Δ_t, ρ_t)` series, checking `Δ_t + ρ_t = 1 − chosen_utility_t` on every
/// coverage step.
pub fn decompose(trace: &RunTrace) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut deltas = Vec::with_capacity(trace.records.len());
    let mut rhos = Vec::with_capacity(trace.records.len());
    for r in &trace.records {
        if trace.env == EnvKind::Coverage {
            let gap = (r.oracle_delta + r.oracle_rho - (1.0 - r.chosen_utility)).abs();
            if !(gap <= IDENTITY_TOL) {
                return Err(Error::InternalConsistency(format!(
                    "step {}: regret decomposition off by {gap:e}",
                    r.t
                )));
            }
        }
        deltas.push(r.oracle_delta);
        rhos.push(r.oracle_rho);
    }
    Ok((deltas, rhos))
}

/// Sliding-window mean of a series; `len − window + 1` values.
pub fn sliding_mean(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window > values.len() {
        return Err(invalid(format!(
            "window {window} must be between 1 and the series length {}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    Ok(out)
}

/// Sliding-window success rate.
pub fn success_curve(trace: &RunTrace, window: usize) -> Result<Vec<f64>> {
    let rewards: Vec<f64> = trace.records.iter().map(|r| f64::from(r.reward)).collect();
    let mut curve = sliding_mean(&rewards, window)?;
    // Rewards are integers, so windows with no mixing must be exact.
    for v in &mut curve {
        *v = (*v * window as f64).round() / window as f64;
    }
    Ok(curve)
}

/// Success rate over the last `window` steps (or all of them if shorter).
pub fn final_success_rate(trace: &RunTrace, window: usize) -> f64 {
    let n = trace.records.len();
    if n == 0 {
        return 0.0;
    }
    let w = window.clamp(1, n);
    let hits: u64 = trace.records[n - w..]
        .iter()
        .map(|r| u64::from(r.reward))
        .sum();
    hits as f64 / w as f64
}

fn join_ids(ids: &[u64]) -> String {
    ids.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

/// Write the trace as CSV with the columns in [`TRACE_COLUMNS`] order.
pub fn write_trace_csv(trace: &RunTrace, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_COLUMNS).map_err(csv_err)?;
    for r in &trace.records {
        out.write_record([
            r.t.to_string(),
            r.query_id.to_string(),
            join_ids(&r.candidate_ids),
            join_ids(&r.chosen_ids),
            r.score.exploit.to_string(),
            r.score.explore.to_string(),
            r.score.ucb.to_string(),
            r.reward.to_string(),
            r.oracle_delta.to_string(),
            r.oracle_rho.to_string(),
            r.oracle_rho_pool.to_string(),
            r.chosen_utility.to_string(),
            r.bank_size_after.to_string(),
            (r.discovery as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::DataCorruption(format!("csv: {other:?}")),
    }
}

/// Read a trace CSV back. Only the columns needed for aggregation have to
/// parse; the header must match [`TRACE_COLUMNS`].
pub fn read_trace_csv(r: impl std::io::Read, env: EnvKind, seed: u64) -> Result<RunTrace> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(TRACE_COLUMNS.iter().copied()) {
        return Err(Error::DataCorruption(format!(
            "trace header {:?} does not match the expected columns",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let ids = |s: &str| -> Result<Vec<u64>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(';')
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::DataCorruption(format!("id {v:?}: {e}")))
            })
            .collect()
    };
    let mut records = Vec::new();
    for (line, row) in rd.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let f = |i: usize| -> Result<f64> {
            row[i].parse().map_err(|e| {
                Error::DataCorruption(format!(
                    "row {}: column {}: {e}",
                    line + 2,
                    TRACE_COLUMNS[i]
                ))
            })
        };
        records.push(StepRecord {
            t: f(0)? as u64,
            query_id: f(1)? as u64,
            candidate_ids: ids(&row[2])?,
            chosen_ids: ids(&row[3])?,
            score: ScoreBreakdown {
                exploit: f(4)?,
                explore: f(5)?,
                ucb: f(6)?,
            },
            reward: f(7)? as u8,
            oracle_delta: f(8)?,
            oracle_rho: f(9)?,
            oracle_rho_pool: f(10)?,
            chosen_utility: f(11)?,
            bank_size_after: f(12)? as usize,
            discovery: f(13)? != 0.0,
        });
    }
    Ok(RunTrace {
        env,
        seed,
        records,
        wall_time: Duration::ZERO,
    })
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub final_success_rate: f64,
    pub overall_success_rate: f64,
    pub regret: f64,
    pub sum_delta: f64,
    pub sum_rho: f64,
    pub sum_rho_pool: f64,
    pub discovery_steps: usize,
    pub bank_size: usize,
    /// Success rate per consecutive block of `window` steps.
    pub window_success: Vec<f64>,
    /// Cumulative regret at the end of each block.
    pub window_regret: Vec<f64>,
}

pub fn summarize(trace: &RunTrace, window: usize) -> RunSummary {
    let n = trace.records.len();
    let regret = pseudo_regret(trace);
    let w = window.max(1);
    let mut window_success = Vec::new();
    let mut window_regret = Vec::new();
    for (i, block) in trace.records.chunks(w).enumerate() {
        let hits: u64 = block.iter().map(|r| u64::from(r.reward)).sum();
        window_success.push(hits as f64 / block.len() as f64);
        window_regret.push(regret[(i * w + block.len()) - 1]);
    }
    let hits: u64 = trace.records.iter().map(|r| u64::from(r.reward)).sum();
    RunSummary {
        seed: trace.seed,
        steps: n,
        final_success_rate: final_success_rate(trace, window),
        overall_success_rate: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        regret: regret.last().copied().unwrap_or(0.0),
        sum_delta: trace.records.iter().map(|r| r.oracle_delta).sum(),
        sum_rho: trace.records.iter().map(|r| r.oracle_rho).sum(),
        sum_rho_pool: trace.records.iter().map(|r| r.oracle_rho_pool).sum(),
        discovery_steps: trace.records.iter().filter(|r| r.discovery).count(),
        bank_size: trace.records.last().map_or(0, |r| r.bank_size_after),
        window_success,
        window_regret,
    }
}
