//! Fast self-checks an installation can run: finite-difference gradients,
//! inverse drift, the symmetric-init zero and the regret identity.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bandit::{BanditPolicy, PolicyConfig, PolicyKind};
use crate::encoder::{Encoder, EncoderConfig};
use crate::engine::{self, Environment};
use crate::env::{CoverageConfig, CoverageEnv};
use crate::linalg::{self, Matrix, PdInverse};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Test hooks for negative controls.
#[derive(Debug, Clone, Copy, Default)]
pub struct Faults {
    /// Added to one entry of the maintained inverse before it is compared.
    pub inverse_perturbation: Option<f64>,
}

pub const SUITES: [&str; 4] = [
    "gradient",
    "inverse-drift",
    "symmetric-zero",
    "decomposition",
];

fn unit_duplicated(half: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..half).map(|_| StandardNormal.sample(rng)).collect();
    let s = 1.0 / (linalg::norm(&v) * std::f64::consts::SQRT_2);
    v.iter_mut().for_each(|a| *a *= s);
    let c = v.clone();
    v.extend(c);
    v
}

fn signs(enc: &Encoder, x: &[f64]) -> Vec<bool> {
    let cache = enc.forward_cached(x).expect("valid input");
    cache
        .pre_activations()
        .iter()
        .flat_map(|z| z.iter().map(|&v| v > 0.0))
        .collect()
}

/// Central differences (h = 1e-5) of `vᵀ f(x; ω)` against the analytic
/// gradient. Coordinates whose perturbation flips a ReLU are skipped since
/// the difference quotient straddles a kink there.
pub fn gradient_suite(seed: u64) -> SuiteResult {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut probes = 0;
    for depth in [2, 3] {
        for probe in 0..10u64 {
            let mut rng = stream_rng(seed, Stream::Init, depth as u64 * 100 + probe);
            let cfg = EncoderConfig::new(8, 16, depth, 4, rng.gen());
            let mut enc = Encoder::init_independent(cfg).expect("valid config");
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cache = enc.forward_cached(&x).expect("valid input");
            let analytic = enc.vjp(&cache, &v);
            let base_signs = signs(&enc, &x);
            let params = enc.params();
            let objective = |e: &Encoder| linalg::dot(&v, &e.forward(&x).expect("valid input"));
            for i in 0..params.len() {
                let mut p = params.clone();
                p[i] = params[i] + h;
                enc.set_params(&p).expect("same length");
                let plus = objective(&enc);
                let plus_signs = signs(&enc, &x);
                p[i] = params[i] - h;
                enc.set_params(&p).expect("same length");
                let minus = objective(&enc);
                let minus_signs = signs(&enc, &x);
                if plus_signs != base_signs || minus_signs != base_signs {
                    skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * h);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic[i] - numeric).abs() / denom);
                checked += 1;
            }
            enc.set_params(&params).expect("same length");
            probes += 1;
        }
    }
    SuiteResult {
        name: "gradient",
        passed: worst < 1e-4 && checked > 0,
        detail: format!(
            "{probes} probes, {checked} coordinates, {skipped} at kinks, max relative error {worst:.3e}"
        ),
    }
}

/// 1000 rank-one updates at d = 16 against a Cholesky-based dense inverse.
pub fn inverse_drift_suite(seed: u64, faults: Faults) -> SuiteResult {
    let d = 16;
    let lambda = 1.0;
    let mut rng = stream_rng(seed, Stream::Context, 0);
    let mut inc = PdInverse::new(d, lambda).expect("valid");
    let mut a = Matrix::identity(d);
    for v in a.as_mut_slice() {
        *v *= lambda;
    }
    for _ in 0..1000 {
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        inc.rank_one_update(&z).expect("finite");
        for i in 0..d {
            for j in 0..d {
                a[(i, j)] += z[i] * z[j];
            }
        }
    }
    if let Some(eps) = faults.inverse_perturbation {
        inc.inverse_mut()[(0, 1)] += eps;
    }
    let mut dense = Matrix::zeros(d, d);
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        let col = a.cholesky_solve(&e).expect("positive definite");
        for i in 0..d {
            dense[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    let diff = inc.inverse().max_abs_diff(&dense);
    SuiteResult {
        name: "inverse-drift",
        passed: diff <= 1e-6,
        detail: format!("max elementwise difference {diff:.3e} after 1000 updates"),
    }
}

/// `|f(x; ω₀)|∞ ≤ 1e-8` for duplicated-half unit inputs.
pub fn symmetric_zero_suite(seed: u64) -> SuiteResult {
    let mut worst: f64 = 0.0;
    for depth in [2, 3] {
        let enc =
            Encoder::init_symmetric(EncoderConfig::new(16, 32, depth, 8, seed)).expect("valid");
        let mut rng = stream_rng(seed, Stream::Context, depth as u64);
        for _ in 0..100 {
            let x = unit_duplicated(8, &mut rng);
            let f = enc.forward(&x).expect("valid input");
            worst = f.iter().fold(worst, |m, v| m.max(v.abs()));
        }
    }
    SuiteResult {
        name: "symmetric-zero",
        passed: worst <= 1e-8,
        detail: format!("max |f| {worst:.3e} over 200 inputs"),
    }
}

/// A short coverage run must satisfy `Δ + ρ = 1 − utility` at every step.
pub fn decomposition_suite(seed: u64) -> SuiteResult {
    let env =
        Environment::Coverage(CoverageEnv::new(CoverageConfig::default(), seed).expect("valid"));
    let mut cfg = PolicyConfig::with_kind(PolicyKind::NeuralLinLogUcb);
    cfg.encoder.width = 16;
    cfg.encoder.output_dim = 8;
    let outcome = BanditPolicy::new(cfg, env.context_dim(), seed)
        .and_then(|p| engine::run(&env, p, None, 300, seed))
        .and_then(|trace| {
            let (d, r) = engine::decompose(&trace)?;
            let total: f64 = d.iter().zip(&r).map(|(a, b)| a + b).sum();
            let regret = engine::pseudo_regret(&trace).last().copied().unwrap_or(0.0);
            Ok((trace.records.len(), (total - regret).abs()))
        });
    match outcome {
        Ok((n, gap)) => SuiteResult {
            name: "decomposition",
            passed: gap <= 1e-6,
            detail: format!("{n} steps, |ΣΔ + Σρ − R_T| = {gap:.3e}"),
        },
        Err(e) => SuiteResult {
            name: "decomposition",
            passed: false,
            detail: e.to_string(),
        },
    }
}

pub fn run_suites(seed: u64, faults: Faults) -> Vec<SuiteResult> {
    vec![
        gradient_suite(seed),
        inverse_drift_suite(seed, faults),
        symmetric_zero_suite(seed),
        decomposition_suite(seed),
    ]
}
