use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use panelfx_cli::commands;
use panelfx_cli::config::{self, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "panelfx", version, about = "County panel policy-effect pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Read the case and covariate files into a panel.
    Ingest(Common),
    /// Detect trend changes in each unit's pre-treatment series.
    Knots(Common),
    /// Screen control units by pre-treatment trend.
    Select(Common),
    /// Difference-in-differences over the donor pools.
    Did(Common),
    /// Negative binomial covariate model.
    Covariates(Common),
    /// Synthetic control on the selected covariates.
    Synth(Common),
    /// Summarize the stage outputs.
    Report(Common),
    /// Check the estimators against brute-force oracles.
    Selftest(Common),
    /// Write a simulated data set and config for a demo run.
    Simulate(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Knots(_) => "knots",
            Command::Select(_) => "select",
            Command::Did(_) => "did",
            Command::Covariates(_) => "covariates",
            Command::Synth(_) => "synth",
            Command::Report(_) => "report",
            Command::Selftest(_) => "selftest",
            Command::Simulate(_) => "simulate",
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<panelfx::Error>())
        .any(panelfx::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn run(cli: Cli) -> Result<u8> {
    let (common, command) = match &cli.command {
        Command::Ingest(c)
        | Command::Knots(c)
        | Command::Select(c)
        | Command::Did(c)
        | Command::Covariates(c)
        | Command::Synth(c)
        | Command::Report(c)
        | Command::Selftest(c)
        | Command::Simulate(c) => (c, &cli.command),
    };
    let cfg: RunConfig = config::load(common.config.as_deref(), &common.overrides).context("loading configuration")?;
    stage(command, &cfg).with_context(|| format!("{} stage", command.name()))
}

fn stage(command: &Command, cfg: &RunConfig) -> Result<u8> {
    match command {
        Command::Ingest(_) => {
            let s = commands::cmd_ingest(cfg)?;
            println!(
                "{} units, {} days ({} to {}); {} with covariates; {} completeness issues",
                s.n_units, s.n_dates, s.first_date, s.last_date, s.units_with_covariates, s.issues
            );
        }
        Command::Knots(_) => {
            let k = commands::cmd_knots(cfg)?;
            println!("{} units fitted, {} failed", k.reports.len(), k.failures.len());
        }
        Command::Select(_) => {
            let s = commands::cmd_select(cfg)?;
            println!("{} candidates, {} rejected", s.candidates.len(), s.rejected.len());
            for c in &s.candidates {
                println!("  {:<12} {:<24} deviation {:.4}", c.unit_id, c.county, c.abs_deviation);
            }
        }
        Command::Did(_) => {
            let d = commands::cmd_did(cfg)?;
            for p in &d.pools {
                println!("{:<32} tau {:>14.6e}  p {:.4}", p.pool, p.fit.tau, p.fit.p_value);
            }
        }
        Command::Covariates(_) => {
            let c = commands::cmd_covariates(cfg)?;
            print!("{}", c.fit.text_table());
            println!("selected: {}", c.selected.join(", "));
        }
        Command::Synth(_) => {
            let s = commands::cmd_synth(cfg)?;
            println!(
                "tau {:.6e} (se {:.4e}); pre-period MSPE {:.4e}",
                s.solution.tau_fit.tau, s.solution.tau_fit.se_tau_classical, s.solution.pre_mspe
            );
        }
        Command::Report(_) => print!("{}", commands::cmd_report(cfg)?),
        Command::Selftest(_) => {
            let s = commands::cmd_selftest(cfg)?;
            println!("{} checks, {} failed", s.checks, s.failed.len());
            if !s.failed.is_empty() {
                for f in &s.failed {
                    eprintln!("FAIL {f}");
                }
                return Ok(3);
            }
        }
        Command::Simulate(_) => {
            let path = commands::cmd_simulate(cfg)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
