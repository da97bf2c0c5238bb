use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lqg_deceive::experiment::{self, ExperimentConfig, Setup};
use lqg_deceive::Error;
use serde_json::json;

/// Cost-signal poisoning of discounted LQG learners.
#[derive(Debug, Parser)]
#[command(name = "lqg-deceive", version)]
struct Cli {
    /// Experiment config (JSON); the built-in benchmark when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimal policy and value function.
    Solve,
    /// Perturbation bounds and their randomized verification.
    Bounds,
    /// Minimal cost falsification for the target policy.
    Attack {
        /// Also write the conic program.
        #[arg(long)]
        dump_problem: bool,
    },
    /// Frequency-domain feasibility evidence for the target policy.
    Feasibility {
        /// Number of unit-circle grid points.
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Batch learner: dataset, clean fit, poisoning, poisoned fit.
    Batch,
    /// Online learner: clean and attacked runs.
    Adp,
    /// Full benchmark pipeline with a pass/fail summary.
    Reproduce,
    /// Tidy CSV series from a reproduction directory.
    Plotdata {
        /// Run directory; defaults to --out.
        run_dir: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure { code, kind: e.kind().into(), message: e.to_string() }
    }
}

fn load(cli: &Cli) -> Result<(ExperimentConfig, PathBuf, Setup), Failure> {
    let (mut cfg, base) = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => (ExperimentConfig::default(), PathBuf::from(".")),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let setup = cfg.resolve(&base)?;
    Ok((cfg, base, setup))
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("output serializes")
}

fn run(cli: &Cli) -> Result<serde_json::Value, Failure> {
    if let Command::Plotdata { run_dir } = &cli.command {
        let dir = run_dir.clone().or_else(|| cli.out.clone()).ok_or_else(|| Failure {
            code: 2,
            kind: "config".into(),
            message: "plotdata needs a run directory".into(),
        })?;
        let files = experiment::plotdata(&dir)?;
        return Ok(json!({ "files": files }));
    }
    let (cfg, base, setup) = load(cli)?;
    let out = out_dir(cli, &cfg);
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    let value = match &cli.command {
        Command::Solve => to_json(&experiment::run_solve(&setup, &out)?),
        Command::Bounds => to_json(&experiment::run_bounds(&setup, &cfg.bounds, cfg.seeds.bounds, &out)?),
        Command::Attack { dump_problem } => {
            let sol = experiment::run_attack(&setup, &cfg.attack, *dump_problem, &out)?;
            json!({
                "status": sol.status,
                "objective": sol.objective,
                "certified": sol.certified,
                "certification_error": sol.certification_error,
                "iterations": sol.iterations,
            })
        }
        Command::Feasibility { grid } => {
            let rep = experiment::run_feasibility(&setup, grid.unwrap_or(cfg.feasibility.grid), &out)?;
            json!({
                "verdict": rep.verdict,
                "cond1_w0_min_eig": rep.cond1_w0_min_eig,
                "cond2_min_eig_over_grid": rep.cond2_min_eig_over_grid,
                "grid_size": rep.grid_size,
                "skipped_points": rep.skipped_points,
            })
        }
        Command::Batch => {
            let b = experiment::run_batch(&setup, &cfg.batch, cfg.seeds.batch, &out)?;
            json!({
                "relative_falsification": b.attack.relative_falsification,
                "clean_policy": b.clean.policy,
                "poisoned_policy": b.poisoned.policy,
                "certified": b.attack.certified,
            })
        }
        Command::Adp => {
            let a = experiment::run_adp(&setup, &cfg.adp, &cfg.attack, cfg.seeds.adp, &out)?;
            json!({
                "clean": { "policy": a.clean.policy, "updates": a.clean.updates, "converged": a.clean.converged },
                "attacked": { "policy": a.attacked.policy, "updates": a.attacked.updates, "converged": a.attacked.converged },
            })
        }
        Command::Reproduce => {
            let summary = experiment::reproduce(&cfg, &base, &out)?;
            if !summary.all_pass {
                let failed: Vec<_> = summary.checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
                let stages: Vec<_> = summary.stages.iter().filter(|s| s.error.is_some()).map(|s| s.name.clone()).collect();
                return Err(Failure {
                    code: 1,
                    kind: "reproduction_failed".into(),
                    message: format!("failed checks {failed:?}, failed stages {stages:?}; see {}", out.join("summary.json").display()),
                });
            }
            to_json(&summary)
        }
        Command::Plotdata { .. } => unreachable!("handled above"),
    };
    Ok(json!({ "out": out, "result": value }))
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("LQG_DECEIVE_LOG", "warn");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("json"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            let err = json!({ "error": { "kind": f.kind, "message": f.message } });
            eprintln!("{err}");
            ExitCode::from(f.code)
        }
    }
}
