//! Multi-seed runs, parameter sweeps and trace aggregation, with the files
//! each of them writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bandit::PolicyKind;
use crate::config::{ExperimentConfig, OutputFormat};
use crate::engine::{self, RunSummary, RunTrace, Runner};
use crate::error::{invalid, Error, Result};
use crate::par::{self, Execution};

pub const MANIFEST_FORMAT: &str = "casebandit-run";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SUCCESS_CURVE_FILE: &str = "success_curve.csv";
pub const REGRET_CURVE_FILE: &str = "regret_curve.csv";
pub const DEFAULT_MAX_RUNS: usize = 1000;

pub const SWEEP_COLUMNS: [&str; 12] = [
    "run",
    "policy",
    "alpha",
    "top_k",
    "eta",
    "seed",
    "final_success_rate",
    "regret",
    "sum_delta",
    "sum_rho",
    "sum_rho_pool",
    "discovery_steps",
];

pub const CURVE_COLUMNS: [&str; 4] = ["t", "mean", "sd", "n"];

/// Reproducibility record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<SweepGrid>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: config.hash(),
            seeds: config.run.seeds.clone(),
            config: config.clone(),
            grid: None,
            inputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            path: path.display().to_string(),
            msg: format!("not a run manifest: {e}"),
        })
    }
}

/// Load a config file, or the config embedded in a run manifest.
pub fn load_config_or_manifest(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config {
        path: String::new(),
        msg: format!("{}: {e}", path.display()),
    })?;
    if value.get("format").and_then(Value::as_str) == Some(MANIFEST_FORMAT) {
        let m = Manifest::read(path)?;
        m.config.validate()?;
        if m.config.hash() != m.config_hash {
            return Err(Error::DataCorruption(format!(
                "{}: config hash does not match its contents",
                path.display()
            )));
        }
        return Ok(m.config);
    }
    ExperimentConfig::from_json(&text)
}

/// Write to a sibling temporary file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Outcome of one seed: the trace so far and the error that stopped it, if any.
#[derive(Debug)]
pub struct SeedOutcome {
    pub trace: RunTrace,
    pub error: Option<Error>,
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> SeedOutcome {
    let empty = |error: Error| SeedOutcome {
        trace: RunTrace {
            env: cfg.env.kind(),
            seed,
            records: Vec::new(),
            wall_time: Default::default(),
        },
        error: Some(error),
    };
    let env = match cfg.build_env(seed) {
        Ok(e) => e,
        Err(e) => return empty(e),
    };
    let policy = match cfg.build_policy(&env, seed) {
        Ok(p) => p,
        Err(e) => return empty(e),
    };
    let mut runner = match Runner::new(&env, policy, cfg.build_gate(), seed) {
        Ok(r) => r,
        Err(e) => return empty(e),
    };
    for _ in 0..cfg.run.horizon {
        if let Err(error) = runner.step() {
            return SeedOutcome {
                trace: runner.snapshot(),
                error: Some(error),
            };
        }
    }
    SeedOutcome {
        trace: runner.finish().0,
        error: None,
    }
}

/// One run per configured seed, in seed order.
pub fn run_all(cfg: &ExperimentConfig, exec: Execution) -> Vec<SeedOutcome> {
    par::map(&cfg.run.seeds, exec, |&s| run_seed(cfg, s))
}

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed{seed}.csv")
}

/// Seed encoded in a trace file name.
pub fn seed_from_file_name(path: &Path) -> Option<u64> {
    path.file_name()?
        .to_str()?
        .strip_prefix("trace_seed")?
        .strip_suffix(".csv")?
        .parse()
        .ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub runs: usize,
    pub final_success_rate: f64,
    pub regret: f64,
    pub sum_delta: f64,
    pub sum_rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub window: usize,
    pub mean: AggregateSummary,
    pub runs: Vec<RunSummary>,
}

pub fn summarize_all(
    cfg: &ExperimentConfig,
    traces: &[&RunTrace],
    window: usize,
) -> ExperimentSummary {
    let runs: Vec<RunSummary> = traces
        .iter()
        .map(|t| engine::summarize(t, window))
        .collect();
    let mean = |f: fn(&RunSummary) -> f64| {
        if runs.is_empty() {
            0.0
        } else {
            runs.iter().map(f).sum::<f64>() / runs.len() as f64
        }
    };
    ExperimentSummary {
        config_hash: cfg.hash(),
        window,
        mean: AggregateSummary {
            runs: runs.len(),
            final_success_rate: mean(|r| r.final_success_rate),
            regret: mean(|r| r.regret),
            sum_delta: mean(|r| r.sum_delta),
            sum_rho: mean(|r| r.sum_rho),
        },
        runs,
    }
}

/// Files written by [`run_to_dir`].
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub traces: Vec<PathBuf>,
    pub summary: Option<PathBuf>,
    pub manifest: PathBuf,
    pub summary_data: ExperimentSummary,
}

/// Run every seed and write traces, the combined summary and the manifest.
/// On a mid-run failure the partial traces and the manifest are still written
/// before the first error is returned.
pub fn run_to_dir(
    cfg: &ExperimentConfig,
    out: &Path,
    exec: Execution,
    window: usize,
) -> Result<RunOutputs> {
    fs::create_dir_all(out)?;
    let outcomes = run_all(cfg, exec);
    let manifest = Manifest::new("run", cfg);
    manifest.write(out)?;
    let mut traces = Vec::new();
    if cfg.output.formats.contains(&OutputFormat::Csv) {
        for o in &outcomes {
            let path = out.join(trace_file_name(o.trace.seed));
            let mut w = BufWriter::new(fs::File::create(&path)?);
            engine::write_trace_csv(&o.trace, &mut w)?;
            traces.push(path);
        }
    }
    let mut outcomes = outcomes;
    if let Some(pos) = outcomes.iter().position(|o| o.error.is_some()) {
        return Err(outcomes.swap_remove(pos).error.expect("checked"));
    }
    let refs: Vec<&RunTrace> = outcomes.iter().map(|o| &o.trace).collect();
    let summary_data = summarize_all(cfg, &refs, window);
    let summary = if cfg.output.formats.contains(&OutputFormat::Json) {
        let path = out.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(&summary_data).expect("summary serializes") + "\n";
        write_atomic(&path, text.as_bytes())?;
        Some(path)
    } else {
        None
    };
    Ok(RunOutputs {
        traces,
        summary,
        manifest: out.join(MANIFEST_FILE),
        summary_data,
    })
}

/// Sweep grid over policy kind, α, k and η. Axes left empty keep the base
/// config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub policy_kind: Vec<PolicyKind>,
    pub alpha: Vec<f64>,
    pub top_k: Vec<usize>,
    pub eta: Vec<f64>,
    /// Refuse grids whose total run count exceeds this.
    pub max_runs: Option<usize>,
}

impl SweepGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: format!("grid.{}", e.path()),
            msg: e.into_inner().to_string(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.policy_kind.is_empty()
            && self.alpha.is_empty()
            && self.top_k.is_empty()
            && self.eta.is_empty()
    }

    /// Cross product of the listed axes applied to `base`.
    pub fn expand(&self, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
        if self.is_empty() {
            return Err(Error::Config {
                path: "grid".into(),
                msg: "the sweep grid lists no values".into(),
            });
        }
        fn axis<T: Clone>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let p = &base.policy;
        let mut out = Vec::new();
        for kind in axis(&self.policy_kind, p.kind) {
            for alpha in axis(&self.alpha, p.alpha) {
                for top_k in axis(&self.top_k, p.top_k) {
                    for eta in axis(&self.eta, p.eta) {
                        let mut c = base.clone();
                        c.policy.kind = kind;
                        c.policy.alpha = alpha;
                        c.policy.top_k = top_k;
                        c.policy.eta = eta;
                        c.validate()?;
                        out.push(c);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One row of the sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub run: usize,
    pub policy: PolicyKind,
    pub alpha: f64,
    pub top_k: usize,
    pub eta: f64,
    pub seed: u64,
    pub summary: RunSummary,
}

/// Run the cross product of `grid` over every seed of `base`.
pub fn sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    exec: Execution,
    window: usize,
) -> Result<Vec<SweepRow>> {
    let configs = grid.expand(base)?;
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| base.run.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let cap = grid.max_runs.unwrap_or(DEFAULT_MAX_RUNS);
    if jobs.len() > cap {
        return Err(Error::Config {
            path: "grid.max_runs".into(),
            msg: format!(
                "the grid expands to {} runs, above the cap of {cap}",
                jobs.len()
            ),
        });
    }
    let results = par::map(&jobs, exec, |&(i, seed)| {
        let o = run_seed(&configs[i], seed);
        match o.error {
            Some(e) => Err(e),
            None => Ok(engine::summarize(&o.trace, window)),
        }
    });
    jobs.iter()
        .zip(results)
        .enumerate()
        .map(|(run, (&(i, seed), summary))| {
            let p = &configs[i].policy;
            Ok(SweepRow {
                run,
                policy: p.kind,
                alpha: p.alpha,
                top_k: p.top_k,
                eta: p.eta,
                seed,
                summary: summary?,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::DataCorruption(format!("csv: {e}"));
    out.write_record(SWEEP_COLUMNS).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.run.to_string(),
            r.policy.name().to_string(),
            r.alpha.to_string(),
            r.top_k.to_string(),
            r.eta.to_string(),
            r.seed.to_string(),
            r.summary.final_success_rate.to_string(),
            r.summary.regret.to_string(),
            r.summary.sum_delta.to_string(),
            r.summary.sum_rho.to_string(),
            r.summary.sum_rho_pool.to_string(),
            r.summary.discovery_steps.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn sweep_to_dir(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    out: &Path,
    exec: Execution,
    window: usize,
) -> Result<Vec<SweepRow>> {
    let rows = sweep(base, grid, exec, window)?;
    fs::create_dir_all(out)?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf)?;
    write_atomic(&out.join(SWEEP_FILE), &buf)?;
    let mut manifest = Manifest::new("sweep", base);
    manifest.grid = Some(grid.clone());
    manifest.write(out)?;
    Ok(rows)
}

/// Mean and sample standard deviation of each column across series.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub t: Vec<u64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub n: usize,
}

pub fn aggregate(series: &[Vec<f64>], first_t: u64) -> Result<Curve> {
    let n = series.len();
    if n == 0 {
        return Err(invalid("nothing to aggregate"));
    }
    let len = series[0].len();
    if series.iter().any(|s| s.len() != len) {
        return Err(invalid("series differ in length"));
    }
    let mut mean = Vec::with_capacity(len);
    let mut sd = Vec::with_capacity(len);
    for j in 0..len {
        let m = series.iter().map(|s| s[j]).sum::<f64>() / n as f64;
        let var = if n > 1 {
            series.iter().map(|s| (s[j] - m).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        mean.push(m);
        sd.push(var.sqrt());
    }
    Ok(Curve {
        t: (0..len as u64).map(|j| first_t + j).collect(),
        mean,
        sd,
        n,
    })
}

pub fn write_curve_csv(curve: &Curve, w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::DataCorruption(format!("csv: {e}"));
    out.write_record(CURVE_COLUMNS).map_err(csv_err)?;
    for j in 0..curve.t.len() {
        out.write_record([
            curve.t[j].to_string(),
            curve.mean[j].to_string(),
            curve.sd[j].to_string(),
            curve.n.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Flatten a JSON value into `dotted.path → scalar` pairs.
fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Keys (other than seeds and output settings) whose values differ.
pub fn config_differences(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    let view = |c: &ExperimentConfig| {
        let mut c = c.clone();
        c.run.seeds.clear();
        c.output = Default::default();
        let mut m = BTreeMap::new();
        flatten(
            "",
            &serde_json::to_value(&c).expect("config serializes"),
            &mut m,
        );
        m
    };
    let (ma, mb) = (view(a), view(b));
    let mut keys: Vec<String> = ma
        .keys()
        .chain(mb.keys())
        .filter(|k| ma.get(*k) != mb.get(*k))
        .cloned()
        .collect();
    keys.sort();
    keys.dedup();
    keys
}

#[derive(Debug, Clone)]
pub struct Report {
    pub config: ExperimentConfig,
    pub success: Curve,
    pub regret: Curve,
}

/// Load traces (each next to its run manifest), check that they share one
/// configuration, and aggregate their success and regret curves.
pub fn report(paths: &[PathBuf], window: Option<usize>) -> Result<Report> {
    if paths.is_empty() {
        return Err(invalid("report needs at least one trace"));
    }
    let mut config: Option<(PathBuf, ExperimentConfig)> = None;
    let mut traces = Vec::new();
    for p in paths {
        let dir = p.parent().unwrap_or(Path::new("."));
        let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
        let cfg = manifest.config;
        if let Some((first, base)) = &config {
            let diff = config_differences(base, &cfg);
            if !diff.is_empty() {
                return Err(Error::Config {
                    path: diff.join(", "),
                    msg: format!(
                        "{} and {} come from different configurations",
                        first.display(),
                        p.display()
                    ),
                });
            }
        } else {
            config = Some((p.clone(), cfg.clone()));
        }
        let env = cfg.env.kind();
        let seed = seed_from_file_name(p).unwrap_or(0);
        let file = fs::File::open(p)?;
        traces.push(engine::read_trace_csv(file, env, seed)?);
    }
    let (_, config) = config.expect("at least one trace");
    let window = window.unwrap_or(config.run.window);
    let success = traces
        .iter()
        .map(|t| engine::success_curve(t, window))
        .collect::<Result<Vec<_>>>()?;
    let regret: Vec<Vec<f64>> = traces.iter().map(engine::pseudo_regret).collect();
    Ok(Report {
        success: aggregate(&success, window as u64)?,
        regret: aggregate(&regret, 1)?,
        config,
    })
}

pub fn report_to_dir(paths: &[PathBuf], window: Option<usize>, out: &Path) -> Result<Report> {
    let rep = report(paths, window)?;
    fs::create_dir_all(out)?;
    for (name, curve) in [
        (SUCCESS_CURVE_FILE, &rep.success),
        (REGRET_CURVE_FILE, &rep.regret),
    ] {
        let mut buf = Vec::new();
        write_curve_csv(curve, &mut buf)?;
        write_atomic(&out.join(name), &buf)?;
    }
    let mut manifest = Manifest::new("report", &rep.config);
    manifest.inputs = paths.iter().map(|p| p.display().to_string()).collect();
    manifest.write(out)?;
    Ok(rep)
}
