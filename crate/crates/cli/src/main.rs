use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ctrldelay::io::{self, CommandOutput, PolicyChoice, RunConfig};

/// Worker threads for the parallel parts; unset means one per core.
const THREADS_ENV: &str = "CTRLDELAY_THREADS";

#[derive(Parser)]
#[command(name = "ctrldelay", version, about = "Optimal control with distributed delay in the control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    config: PathBuf,
    /// Output directory; defaults to `output.dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the structure hypotheses and noise nondegeneracy.
    Check(Common),
    /// Solve the value recursion and write the solution tables.
    Solve(Common),
    /// Simulate a policy: `feedback`, `zero` or `constant:v1,v2,...`.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "feedback")]
        policy: String,
        /// Solution file (required for the feedback policy).
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Identity residuals and verification inequalities over the probe battery.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Compare with the Riccati value (delay-free quadratic problems only).
    Oracle(Common),
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    Ok((cfg, out))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let threads: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<CommandOutput> {
    configure_threads()?;
    let out = match &cli.command {
        Command::Check(c) => {
            let (cfg, out) = load(c)?;
            io::cmd_check(&cfg, &out)?
        }
        Command::Solve(c) => {
            let (cfg, out) = load(c)?;
            io::cmd_solve(&cfg, &out)?
        }
        Command::Simulate {
            common,
            policy,
            solution,
        } => {
            let (cfg, out) = load(common)?;
            let policy: PolicyChoice = policy.parse()?;
            io::cmd_simulate(&cfg, solution.as_deref(), &policy, &out)?
        }
        Command::Verify { common, solution } => {
            let (cfg, out) = load(common)?;
            io::cmd_verify(&cfg, solution, &out)?
        }
        Command::Oracle(c) => {
            let (cfg, out) = load(c)?;
            io::cmd_oracle(&cfg, &out)?
        }
    };
    Ok(out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{}", out.report);
            if out.success {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
