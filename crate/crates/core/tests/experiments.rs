//! End-to-end checks of runs, sweeps and reports written to disk.

use std::collections::HashMap;
use std::path::PathBuf;

use casebandit::bandit::PolicyKind;
use casebandit::config::{EnvConfig, ExperimentConfig};
use casebandit::env::CoverageConfig;
use casebandit::experiment::{self, SweepGrid};
use casebandit::par::Execution;
use casebandit::Error;

fn small(horizon: u64, seeds: &[u64]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run.horizon = horizon;
    cfg.run.seeds = seeds.to_vec();
    cfg
}

#[test]
fn alpha_grid_gives_one_row_per_run() {
    let cfg = small(50, &[0, 1]);
    let grid = SweepGrid::from_json(r#"{"alpha": [0.0, 0.1]}"#).unwrap();
    let rows = experiment::sweep(&cfg, &grid, Execution::Parallel, 20).unwrap();
    assert_eq!(rows.len(), 4);
    let mut pairs: Vec<(u64, u64)> = rows.iter().map(|r| (r.alpha.to_bits(), r.seed)).collect();
    pairs.sort();
    pairs.dedup();
    assert_eq!(pairs.len(), 4);
}

#[test]
fn empty_grid_and_oversized_grid_are_refused() {
    let cfg = small(20, &[0]);
    let empty = SweepGrid::from_json("{}").unwrap();
    assert!(matches!(
        experiment::sweep(&cfg, &empty, Execution::Sequential, 10),
        Err(Error::Config { .. })
    ));
    let big =
        SweepGrid::from_json(r#"{"alpha": [0.0, 0.1, 0.2], "eta": [0.01, 0.02], "max_runs": 5}"#)
            .unwrap();
    let err = experiment::sweep(&cfg, &big, Execution::Sequential, 10).unwrap_err();
    assert!(err.to_string().contains('6'), "{err}");
}

#[test]
fn adaptive_reranker_wins_policy_sweep_on_hidden_features() {
    let mut cfg = small(3000, &(0..6).collect::<Vec<_>>());
    cfg.env = EnvConfig::Coverage(CoverageConfig {
        embed_noise: 0.5,
        ..CoverageConfig::default()
    });
    let grid =
        SweepGrid::from_json(r#"{"policy_kind": ["neural_lin_log_ucb", "np_cbr", "random"]}"#)
            .unwrap();
    let rows = experiment::sweep(&cfg, &grid, Execution::Parallel, 500).unwrap();
    let mut by_kind: HashMap<PolicyKind, Vec<f64>> = HashMap::new();
    for r in &rows {
        by_kind
            .entry(r.policy)
            .or_default()
            .push(r.summary.final_success_rate);
    }
    let mean = |k| by_kind[&k].iter().sum::<f64>() / by_kind[&k].len() as f64;
    let best = mean(PolicyKind::NeuralLinLogUcb);
    assert!(best > mean(PolicyKind::NpCbr), "{by_kind:?}");
    assert!(best > mean(PolicyKind::Random), "{by_kind:?}");
}

fn traces_of(dir: &std::path::Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| experiment::seed_from_file_name(p).is_some())
        .collect();
    v.sort();
    v
}

#[test]
fn report_aggregates_and_refuses_mixed_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    experiment::run_to_dir(&small(60, &[0, 1, 2, 3, 4]), &a, Execution::Parallel, 20).unwrap();
    let five = traces_of(&a);
    assert_eq!(five.len(), 5);
    let rep = experiment::report(&five, Some(20)).unwrap();
    assert_eq!(rep.success.n, 5);
    assert_eq!(rep.regret.mean.len(), 60);
    assert!(rep.regret.sd.iter().any(|&s| s > 0.0));

    let one = experiment::report(&five[..1], Some(20)).unwrap();
    assert!(one
        .success
        .sd
        .iter()
        .chain(&one.regret.sd)
        .all(|&s| s == 0.0));

    let b = tmp.path().join("b");
    let mut other = small(60, &[0]);
    other.policy.alpha = 0.5;
    experiment::run_to_dir(&other, &b, Execution::Parallel, 20).unwrap();
    let mixed = vec![five[0].clone(), traces_of(&b)[0].clone()];
    let err = experiment::report(&mixed, Some(20)).unwrap_err();
    assert!(err.to_string().contains("policy.alpha"), "{err}");
}

#[test]
fn pool_regret_never_exceeds_bank_regret() {
    let mut cfg = small(800, &[0, 1]);
    cfg.env = EnvConfig::Coverage(CoverageConfig {
        embed_noise: 0.5,
        ..CoverageConfig::default()
    });
    cfg.policy.recall_k = 4;
    for o in experiment::run_all(&cfg, Execution::Parallel) {
        for r in &o.trace.records {
            assert!(
                r.oracle_rho_pool >= -1e-12 && r.oracle_rho_pool <= r.oracle_rho + 1e-12,
                "{r:?}"
            );
        }
    }
}
