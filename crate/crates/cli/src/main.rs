//! `casemix`: standardize trial effects across case-mixes and pool them.

mod artifact;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use casemix::meta::McmcSettings;
use casemix::sim::ORACLE_DRAWS;
use casemix::{EffectScale, Error, ErrorKind, Result};
use clap::{Parser, Subcommand};

use crate::artifact::Invocation;
use crate::commands::{Context, SimOutput, SimSetting, SimulateArgs};
use crate::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "casemix", version, about = "Case-mix standardized meta-analysis")]
struct Cli {
    /// TOML analysis configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Effect scale: rd, log-rr or log-or.
    #[arg(long, global = true)]
    scale: Option<EffectScale>,
    /// Truncation percentile of the weights in (0, 1].
    #[arg(long, global = true)]
    truncation: Option<f64>,
    /// Record infeasible pairs instead of failing.
    #[arg(long, global = true)]
    skip_infeasible: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit transport weights and standardized effects for every pair.
    Standardize,
    /// Reconstruct covariate covariances of the aggregated trials.
    ReconCov,
    /// Generate pseudo participant data for the aggregated trials.
    PseudoIpd,
    /// Sandwich covariance of all standardized effects.
    Variance,
    /// Fit the two-random-effect model by MCMC.
    Meta,
    /// Run a simulation study.
    Simulate {
        /// 1 or 2 for the transport study, `meta` for the pooling model.
        #[arg(long, default_value = "1")]
        setting: SimSetting,
        /// Patients per replicate (transport study).
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        /// Number of studies (pooling model).
        #[arg(long, default_value_t = 20)]
        q: usize,
        /// Studies with aggregated data only (pooling model).
        #[arg(long, default_value_t = 10)]
        z: usize,
        #[arg(long, default_value_t = ORACLE_DRAWS)]
        oracle_draws: usize,
    },
    /// Run every analysis step and write forest-plot data.
    Pipeline,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Infeasible => 4,
    }
}

fn context(cli: &Cli, needs_config: bool) -> Result<Context> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None if needs_config => return Err(Error::Validation("this command requires --config".into())),
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.scale {
        cfg.scale = s;
    }
    if let Some(t) = cli.truncation {
        cfg.truncation = t;
    }
    cfg.skip_infeasible |= cli.skip_infeasible;
    let seed = cli.seed.or(cfg.seed).unwrap_or(1);
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    let invocation = Invocation {
        args: std::env::args().collect(),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok(Context { cfg, seed, out, invocation })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Validation(format!("cannot configure {n} threads: {e}")))?;
    }
    let ctx = context(&cli, !matches!(cli.command, Command::Simulate { .. }))?;
    match cli.command {
        Command::Standardize => {
            let p = commands::standardize(&ctx)?;
            println!("{} estimates, {} skipped pairs", p.estimates.len(), p.skipped.len());
        }
        Command::ReconCov => {
            let p = commands::recon_cov(&ctx)?;
            println!("{} reconstructed covariance matrices", p.targets.len());
        }
        Command::PseudoIpd => {
            let p = commands::pseudo_ipd(&ctx)?;
            println!("{} pseudo trials", p.files.len());
        }
        Command::Variance => {
            let p = commands::variance(&ctx)?;
            println!("{} effects in the covariance table", p.table.entries.len());
        }
        Command::Meta => {
            let p = commands::meta(&ctx)?;
            let t = &p.summary.theta;
            println!("theta {:.4} [{:.4}, {:.4}], tau2 {:.4}", t.median, t.lower, t.upper, p.summary.tau2.median);
        }
        Command::Pipeline => commands::pipeline(&ctx)?,
        Command::Simulate { setting, n, reps, q, z, oracle_draws } => {
            let mcmc = if cli.config.is_some() { ctx.cfg.mcmc } else { McmcSettings::default() };
            let args = SimulateArgs { setting, n, reps, q, z, oracle_draws, mcmc };
            match commands::simulate(&ctx, &args)? {
                SimOutput::Transport(r) => {
                    for row in &r.rows {
                        println!(
                            "{} n={} bias={:.2e} var={:.2e} var_hat={:.2e} coverage={:.1}",
                            row.parameter, row.n, row.bias, row.var, row.var_hat_median, row.coverage
                        );
                    }
                }
                SimOutput::Meta(r) => println!(
                    "theta {:.3} omega2 {:.3} tau2 {:.3} xi2 {:.3} ({} failed)",
                    r.theta.median, r.omega2.median, r.tau2.median, r.xi2.median, r.failed
                ),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
