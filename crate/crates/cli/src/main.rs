use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use casebandit::config::ExperimentConfig;
use casebandit::experiment::{self, SweepGrid};
use casebandit::par::{self, Execution};
use casebandit::validate::{self, Faults};
use casebandit::Error;

/// Column reference for every CSV the tool writes.
const SCHEMA: &str = include_str!("../schema/columns.md");

const OUT_ENV: &str = "CASEBANDIT_OUT";
const FALLBACK_OUT: &str = "casebandit-out";

#[derive(Parser)]
#[command(
    name = "casebandit",
    version,
    about = "Case-bank retrieval bandit experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Output directory [default: $CASEBANDIT_OUT, then the config's output.dir, then ./casebandit-out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs (1 runs sequentially)
    #[arg(long)]
    jobs: Option<usize>,
    /// Added to every configured seed
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
    /// Window for success curves and final success rates
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config (or rerun a manifest) for every seed
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the cross product of a grid over policy kind, alpha, top_k and eta
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid as a JSON file or an inline JSON object
        #[arg(long)]
        grid: String,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate trace CSVs of one config into mean and sd curves
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in oracle suites
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the maintained inverse by this amount (negative control)
        #[arg(long, hide = true)]
        inject_drift: Option<f64>,
    },
    /// Print the CSV column reference
    Schema,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => experiment::load_config_or_manifest(p)
            .with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply(cfg: &mut ExperimentConfig, common: &Common) -> Result<()> {
    for s in &mut cfg.run.seeds {
        *s = s
            .checked_add(common.seed_offset)
            .ok_or_else(|| Error::InvalidArgument("seed offset overflows".into()))?;
    }
    if let Some(w) = common.window {
        cfg.run.window = w;
    }
    cfg.validate()?;
    Ok(())
}

fn out_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.and_then(|c| c.output.dir.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT))
}

fn execution(jobs: Option<usize>) -> Execution {
    if jobs == Some(1) || !Execution::parallel_available() {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, common } => {
            let mut cfg = load_config(config.as_deref())?;
            apply(&mut cfg, &common)?;
            let out = out_dir(&common, Some(&cfg));
            let window = cfg.run.window;
            let res = par::with_jobs(common.jobs, || {
                experiment::run_to_dir(&cfg, &out, execution(common.jobs), window)
            })?;
            for t in &res.traces {
                println!("wrote {}", t.display());
            }
            let m = &res.summary_data.mean;
            println!(
                "{} runs: final success {:.4}, regret {:.3}, sum delta {:.3}, sum rho {:.3}",
                m.runs, m.final_success_rate, m.regret, m.sum_delta, m.sum_rho
            );
            println!("manifest {}", res.manifest.display());
        }
        Command::Sweep {
            config,
            grid,
            common,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            apply(&mut cfg, &common)?;
            let text = if grid.trim_start().starts_with('{') {
                grid
            } else {
                std::fs::read_to_string(&grid).with_context(|| format!("reading grid {grid}"))?
            };
            let grid = SweepGrid::from_json(&text)?;
            let out = out_dir(&common, Some(&cfg));
            let window = cfg.run.window;
            let rows = par::with_jobs(common.jobs, || {
                experiment::sweep_to_dir(&cfg, &grid, &out, execution(common.jobs), window)
            })?;
            println!(
                "{} runs written to {}",
                rows.len(),
                out.join(experiment::SWEEP_FILE).display()
            );
        }
        Command::Report { traces, common } => {
            let out = out_dir(&common, None);
            let rep = experiment::report_to_dir(&traces, common.window, &out)?;
            println!("aggregated {} traces into {}", rep.success.n, out.display());
        }
        Command::Validate { seed, inject_drift } => {
            let results = validate::run_suites(
                seed,
                Faults {
                    inverse_perturbation: inject_drift,
                },
            );
            let mut ok = true;
            for r in &results {
                println!(
                    "{} {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                ok &= r.passed;
            }
            if !ok {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Schema => print!("{SCHEMA}"),
    }
    Ok(ExitCode::SUCCESS)
}

/// 1 for usage and configuration problems, 2 for internal failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::InternalConsistency(_)
            | Error::NumericalDegeneracy(_)
            | Error::Convergence { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
