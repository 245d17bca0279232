use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qclt_cli::commands::{self, Overrides};
use qclt_cli::config::LoadedConfig;
use qclt_cli::output::OutputDir;
use qclt_cli::CliError;

/// Asynchronous Q-learning CLT lab.
///
/// Exit codes: 0 success, 1 internal error or failed property,
/// 2 assumption violation, 3 configuration error.
#[derive(Debug, Parser)]
#[command(name = "qclt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for replicas (default: available cores).
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Write per-replica samples.
    #[arg(long, global = true)]
    emit_samples: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Oracle dump, chain report and Ψ diagnostics.
    Analyze,
    /// Endpoint CLT statistics over the horizon grid.
    Clt,
    /// Functional CLT increments at the largest horizon.
    Fclt,
    /// Property suite verdict.
    Validate,
    /// Random fixture from the [generator] table.
    GenMdp,
}

fn run(cli: Cli) -> Result<OutputDir, CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::config("--config", "a configuration file is required"))?;
    let loaded = LoadedConfig::load(&path)?;
    let ov = Overrides {
        seed: cli.seed,
        parallelism: cli.parallelism,
        emit_samples: cli.emit_samples,
    };
    match cli.command {
        Command::Analyze => commands::cmd_analyze(loaded, &ov),
        Command::Clt => commands::cmd_clt(loaded, &ov),
        Command::Fclt => commands::cmd_fclt(loaded, &ov),
        Command::Validate => commands::cmd_validate(loaded, &ov),
        Command::GenMdp => commands::cmd_gen_mdp(loaded, &ov),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match run(cli) {
        Ok(out) => {
            for p in out.written() {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("qclt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
