//! Scenario runner: integrates the configured model, writes CSV/JSON
//! results, static SVG plots, and a manifest; `verify` replays a scenario
//! against its exact-flow counterpart.

mod config;
mod output;
mod scenario;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::ScenarioConfig;
use scenario::RunContext;

#[derive(Parser)]
#[command(name = "cmflow", version, about = "Matrix-flow scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config and write its artifacts.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Suppress wall-time and other nondeterministic manifest fields.
        #[arg(long)]
        deterministic: bool,
    },
    /// Re-run a scenario against its exact-flow oracle and report.
    Verify {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
    /// Print and write the sign-pattern rank table up to n-max.
    Ranktable {
        #[arg(long, default_value_t = 8)]
        n_max: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_INTEGRATION: u8 = 3;

fn load_config(
    path: &Path,
    seed: Option<u64>,
    tol: Option<f64>,
) -> Result<(ScenarioConfig, String)> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = tol {
        cfg.tol = t;
    }
    cfg.validate()?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    Ok((cfg, name))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            tol,
            out_dir,
            deterministic,
        } => {
            let (cfg, name) = match load_config(&config, seed, tol) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("config error: {e:#}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let ctx = RunContext {
                out_dir: out_dir.join(&name),
                cfg,
                deterministic,
            };
            match scenario::run(&ctx) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) if scenario::is_integration_failure(&e) => {
                    eprintln!("integration failure: {e:#}");
                    ExitCode::from(EXIT_INTEGRATION)
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Verify {
            config,
            seed,
            tol,
            out_dir,
            deterministic,
        } => {
            let (cfg, name) = match load_config(&config, seed, tol) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("config error: {e:#}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let ctx = RunContext {
                out_dir: out_dir.join(&name),
                cfg,
                deterministic,
            };
            match scenario::verify(&ctx) {
                Ok(_) => ExitCode::SUCCESS,
                Err(e) if scenario::is_integration_failure(&e) => {
                    eprintln!("integration failure: {e:#}");
                    ExitCode::from(EXIT_INTEGRATION)
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Ranktable {
            n_max,
            out_dir,
            deterministic,
        } => {
            if !(3..=11).contains(&n_max) {
                eprintln!("config error: --n-max must lie in [3, 11], got {n_max}");
                return ExitCode::from(EXIT_CONFIG);
            }
            let cfg = ScenarioConfig {
                model: config::Model::RankTable,
                n: None,
                seed: 0,
                t_end: None,
                dt_out: None,
                tol: 1e-10,
                outputs: vec![config::OutputKind::Json],
                xi: None,
                n_traj: None,
                n_max: Some(n_max),
                trap: None,
                initial: Default::default(),
            };
            let ctx = RunContext {
                out_dir: out_dir.join("ranktable"),
                cfg,
                deterministic,
            };
            match scenario::run(&ctx) {
                Ok(()) => {
                    // also echo the table to stdout
                    let path = ctx.out_dir.join("ranks.json");
                    if let Ok(text) = std::fs::read_to_string(&path) {
                        println!("{text}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
