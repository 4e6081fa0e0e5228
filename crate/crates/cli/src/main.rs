use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hemoscale_cli::{dispatch, CliError, CommandName, RunConfig};

#[derive(Parser)]
#[command(name = "hemoscale", version, about = "Simulate and analyse the three-compartment amplifying branching process")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory in the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for replica ensembles.
    #[arg(long, global = true, env = "HEMOSCALE_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Single trajectories, one CSV per configured window.
    Simulate,
    /// Per-time ensemble statistics.
    Ensemble,
    /// Mean ODE and deterministic limits on a grid.
    Limits,
    /// Limit SDE paths, expansions and SDE ensemble moments.
    Fluct,
    /// Sweep over K and fit the N3 fluctuation exponent.
    ScalingStudy,
    /// Engine self-checks on bundled small instances.
    Validate,
}

impl From<Command> for CommandName {
    fn from(c: Command) -> Self {
        match c {
            Command::Simulate => CommandName::Simulate,
            Command::Ensemble => CommandName::Ensemble,
            Command::Limits => CommandName::Limits,
            Command::Fluct => CommandName::Fluct,
            Command::ScalingStudy => CommandName::ScalingStudy,
            Command::Validate => CommandName::Validate,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = Some(out);
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let out = cfg.out_dir();
    let result = dispatch(cli.command.into(), &cfg, &out)?;
    for f in &result.files {
        println!("{}", f.display());
    }
    println!("{}", result.manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hemoscale: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
