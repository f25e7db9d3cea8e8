use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Parser, Subcommand};

use cipstab_cli::config::{parse_config, Experiment};
use cipstab_cli::experiments::run_experiment;

#[derive(Parser)]
#[command(name = "cipstab", version, about = "Stabilised continuous finite elements for linear transport")]
struct Cli {
    /// Override the output directory of the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run whatever experiment the config names.
    Solve { config: PathBuf },
    Convergence { config: PathBuf },
    Shock { config: PathBuf },
    Localisation { config: PathBuf },
    StabilityDiag { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match try_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn try_main() -> anyhow::Result<bool> {
    let cli = Cli::parse();
    let (path, expected) = match cli.command {
        Command::Solve { config } => (config, None),
        Command::Convergence { config } => (config, Some(Experiment::Convergence)),
        Command::Shock { config } => (config, Some(Experiment::Shock)),
        Command::Localisation { config } => (config, Some(Experiment::Localisation)),
        Command::StabilityDiag { config } => (config, Some(Experiment::StabilityDiag)),
    };
    let mut cfg = parse_config(&path)?;
    if let Some(e) = expected {
        if cfg.experiment != e {
            bail!("config {} describes {:?}, not {e:?}", path.display(), cfg.experiment);
        }
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    let report = run_experiment(&cfg)?;
    for c in &report.checks {
        let status = match (c.passed, c.asserted) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "note",
        };
        println!("{status} {}: {}", c.name, c.detail);
    }
    println!("report written to {}", cfg.output_dir.join("report.json").display());
    Ok(report.all_passed())
}
