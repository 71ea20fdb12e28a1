use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use rmtcorr_cli::config::ExperimentConfig;
use rmtcorr_cli::experiments::{self, resolve_jobs};
use rmtcorr_cli::law::{emit_limit_law, LawFamily, LawRequest};
use rmtcorr_cli::report;

#[derive(Parser)]
#[command(name = "rmt-corr", version, about = "Monte Carlo experiments on high-dimensional sample correlation matrices")]
struct Cli {
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true, env = "RMT_CORR_JOBS")]
    jobs: Option<usize>,
    /// Output directory; overrides the config's `output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `key=value`, with dotted keys (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write rows.csv, timings.csv and summary.json.
    Run { config: PathBuf },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// Tabulate a limit law into density.csv and law.json.
    Law {
        /// mp, semicircle, general or general-zero-gamma.
        kind: LawFamily,
        #[arg(long)]
        gamma: Option<f64>,
        /// Population spectrum as JSON `[[t, w], ...]` or a file containing it.
        #[arg(long)]
        h: Option<String>,
        #[arg(long, default_value_t = 1001)]
        points: usize,
        #[arg(long, allow_negative_numbers = true)]
        lo: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        hi: Option<f64>,
        /// Imaginary offset for Stieltjes inversion.
        #[arg(long)]
        eta: Option<f64>,
    },
}

fn load(path: &Path, set: &[String]) -> Result<ExperimentConfig> {
    let config = ExperimentConfig::load(path, set)?;
    experiments::plan(&config)?;
    Ok(config)
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate { config } => {
            let c = load(&config, &cli.set)?;
            println!("{}: ok ({}, {} replications)", config.display(), c.experiment.name(), c.reps);
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config } => {
            let c = load(&config, &cli.set)?;
            let dir = cli
                .out
                .or_else(|| c.output.clone())
                .unwrap_or_else(|| PathBuf::from("rmt-corr-out").join(c.experiment.name()));
            let out = experiments::run(&c, resolve_jobs(cli.jobs))?;
            let summary = report::write_all(&dir, &c, &out)?;
            for band in &summary.bands {
                println!(
                    "{} {}: mean {} vs {} ± {}",
                    if band.passed { "PASS" } else { "FAIL" },
                    band.statistic,
                    band.mean,
                    band.center,
                    band.half_width
                );
            }
            if summary.failed_replications > 0 {
                log::warn!("{} replications failed; see the error column", summary.failed_replications);
            }
            println!("wrote {}", dir.display());
            Ok(if summary.passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Law { kind, gamma, h, points, lo, hi, eta } => {
            let request = LawRequest { family: kind, gamma, h, points, lo, hi, eta };
            let dir = cli.out.unwrap_or_else(|| PathBuf::from("rmt-corr-out").join("law"));
            let header = emit_limit_law(&request, &dir)?;
            println!("total mass {} on [{}, {}]; wrote {}", header.total_mass, header.support.0, header.support.1, dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
