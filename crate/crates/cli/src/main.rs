use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use exproj_cli::{execute, CliError, Command, ExperimentConfig, RawConfig};

#[derive(Parser)]
#[command(name = "exproj", version, about = "Projection pursuit experiments on Gaussian point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Solve the PDE for a given order parameter
    SolvePde(Opts),
    /// Minimise the functional over order parameters
    Minimize(Opts),
    /// Run the two-stage AMP on a sampled point cloud
    RunAmp(Opts),
    /// Iterate state evolution and certify the fixed point
    StateEvolution(Opts),
    /// Cross-check the PDE, the control problem and the SDE
    VerifyDuality(Opts),
}

#[derive(Args)]
struct Opts {
    /// Config file with one `key = value` per line; a run manifest also works
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
}

fn load(command: Command, opts: &Opts) -> Result<ExperimentConfig, CliError> {
    let mut raw = match &opts.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::new(),
    };
    for kv in &opts.set {
        raw.apply_override(kv)?;
    }
    if let Some(dir) = &opts.out {
        raw.set("out_dir", &dir.display().to_string())?;
    }
    if let Some(seed) = opts.seed {
        raw.set("seed", &seed.to_string())?;
    }
    if let Some(alpha) = opts.alpha {
        raw.set("alpha", &format!("{alpha:?}"))?;
    }
    ExperimentConfig::from_raw(command, &raw)
}

fn main() -> ExitCode {
    let (command, opts) = match Cli::parse().command {
        Sub::SolvePde(o) => (Command::SolvePde, o),
        Sub::Minimize(o) => (Command::Minimize, o),
        Sub::RunAmp(o) => (Command::RunAmp, o),
        Sub::StateEvolution(o) => (Command::StateEvolution, o),
        Sub::VerifyDuality(o) => (Command::VerifyDuality, o),
    };
    match load(command, &opts).and_then(|cfg| execute(&cfg).map(|m| (cfg, m))) {
        Ok((cfg, manifest)) => {
            for (stage, key, value) in &manifest.outputs {
                println!("{stage}.{key} = {value}");
            }
            println!("manifest: {}", cfg.out_dir.join(exproj_cli::MANIFEST_FILE).display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("exproj: [{}] {e}", e.category());
            if let CliError::Numerical { report: Some(path), .. } = &e {
                eprintln!("report: {}", path.display());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
