//! Statistical and property checks on the synthetic environments and the
//! reranker's selection rule.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use casebandit::bandit::{BanditPolicy, PolicyConfig, PolicyKind};
use casebandit::casebank::CaseBank;
use casebandit::config::{EnvConfig, ExperimentConfig};
use casebandit::engine;
use casebandit::env::{encode_point, CoverageConfig, CoverageEnv, LatentConfig};
use casebandit::experiment;
use casebandit::par::Execution;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn query_mean_is_centre_of_cube() {
    let env = CoverageEnv::new(
        CoverageConfig {
            query_dim: 3,
            ..CoverageConfig::default()
        },
        7,
    )
    .unwrap();
    let n = 100_000;
    let mut sum = [0.0; 3];
    for t in 0..n {
        let (q, _) = env.query_at(t);
        sum.iter_mut().zip(&q).for_each(|(s, v)| *s += v);
    }
    for s in sum {
        assert!(
            (s / n as f64 - 0.5).abs() < 0.01,
            "coordinate mean {}",
            s / n as f64
        );
    }
}

#[test]
fn far_queries_succeed_at_floor_rate() {
    let env = CoverageEnv::new(CoverageConfig::default(), 11).unwrap();
    let mut bank = CaseBank::new(env.embedding_dim()).unwrap();
    let corner = [0.0, 0.0];
    let emb = env.observable_embedding(&[1.0, 0.0]);
    bank.retain(encode_point(&corner), "s", 1, &emb, 0).unwrap();
    let case = &bank.cases()[0];
    let far = [1.0, 1.0];
    assert_eq!(env.expected_utility(&far, Some(case)).unwrap(), 0.1);
    let n = 100_000;
    let hits: u64 = (0..n)
        .map(|t| env.reward_at(t, env.expected_utility(&far, Some(case)).unwrap()) as u64)
        .sum();
    let rate = hits as f64 / n as f64;
    assert!((rate - 0.1).abs() < 0.01, "rate {rate}");
}

#[test]
fn utility_is_lipschitz_and_floored() {
    let env = CoverageEnv::new(
        CoverageConfig {
            query_dim: 3,
            lipschitz: 2.5,
            ..CoverageConfig::default()
        },
        3,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let q: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
        let q2: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
        let (u1, u2) = (env.utility_between(&q, &c), env.utility_between(&q2, &c));
        assert!((u1 - u2).abs() <= 2.5 * dist(&q, &q2) + 1e-12);
        assert!((0.1..=1.0).contains(&u1));
    }
}

#[test]
fn reward_stream_is_reproducible() {
    let env = CoverageEnv::new(CoverageConfig::default(), 21).unwrap();
    let a: Vec<u8> = (0..500).map(|t| env.reward_at(t, 0.4)).collect();
    let b: Vec<u8> = (0..500).map(|t| env.reward_at(t, 0.4)).collect();
    assert_eq!(a, b);
}

#[test]
fn random_policy_regret_grows_linearly() {
    let mut cfg = ExperimentConfig {
        env: EnvConfig::Latent(LatentConfig::default()),
        ..ExperimentConfig::default()
    };
    cfg.policy.kind = PolicyKind::Random;
    cfg.run.horizon = 4000;
    cfg.run.seeds = (0..10).collect();
    let traces: Vec<_> = experiment::run_all(&cfg, Execution::Parallel)
        .into_iter()
        .map(|o| o.trace)
        .collect();
    let avg = |t: usize| {
        traces
            .iter()
            .map(|tr| engine::pseudo_regret(tr)[t - 1] / t as f64)
            .sum::<f64>()
            / traces.len() as f64
    };
    let (early, late) = (avg(500), avg(4000));
    assert!(
        (late / early - 1.0).abs() <= 0.15,
        "R_T/T {late} at 4000 vs {early} at 500"
    );
}

fn unit_duplicated(raw: &[f64]) -> Vec<f64> {
    let n = raw.iter().map(|a| a * a).sum::<f64>().sqrt() * 2f64.sqrt();
    let half: Vec<f64> = raw.iter().map(|a| a / n).collect();
    [half.clone(), half].concat()
}

fn trained_policy(seed: u64) -> BanditPolicy {
    let mut cfg = PolicyConfig::with_kind(PolicyKind::NeuralLinLogUcb);
    cfg.encoder.width = 16;
    cfg.encoder.output_dim = 4;
    cfg.interval = 4;
    let mut p = BanditPolicy::new(cfg, 8, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..9 {
        let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        p.observe(&unit_duplicated(&raw), rng.gen_range(0..2) as f64)
            .unwrap();
        p.update_encoder_if_due().unwrap();
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn appending_a_weaker_candidate_keeps_the_choice(
        seed in 0u64..1000,
        raws in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..12),
        extra in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        prop_assume!(raws.iter().chain([&extra]).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let policy = trained_policy(seed);
        let mut cands: Vec<Vec<f64>> = raws.iter().map(|r| unit_duplicated(r)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (idx, best) = policy.select(&cands, &mut rng).unwrap();
        let x = unit_duplicated(&extra);
        prop_assume!(policy.score(&x).unwrap().ucb < best.ucb);
        cands.push(x);
        let (idx2, _) = policy.select(&cands, &mut rng).unwrap();
        prop_assert_eq!(idx, idx2);
    }
}
