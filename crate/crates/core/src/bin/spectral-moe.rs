use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spectral_moe::commands::{self, Command};
use spectral_moe::config::ExperimentConfig;
use spectral_moe::report;
use spectral_moe::Error;

/// Spectral LoRA mixture-of-experts: property checks, synthetic experiments
/// and parameter accounting.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<command>-seed<seed>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed; required without --config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweep cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Validate the files in --out against their schemas instead of running.
    #[arg(long, global = true)]
    check_schemas: bool,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Cmd {
    /// Run the property suite.
    Verify,
    /// Compare adapter methods on a synthetic domain mixture.
    Train,
    /// Sequential two-task training with retention measurement.
    Forget,
    /// Grid over expert count and top-k at fixed total rank.
    Sweep,
    /// Router gate-weight moments against their closed forms.
    Moments,
    /// Trainable-parameter and FLOP tables for the backbone presets.
    Account,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Verify => Command::Verify,
            Cmd::Train => Command::Train,
            Cmd::Forget => Command::Forget,
            Cmd::Sweep => Command::Sweep,
            Cmd::Moments => Command::Moments,
            Cmd::Account => Command::Account,
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_) | Error::Schema(_) => 2,
        Error::Io { .. } => 3,
        _ => 4,
    }
}

fn fail(err: Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code(&err))
}

fn check_schemas(cli: &Cli) -> ExitCode {
    let Some(dir) = &cli.out else {
        eprintln!("error: --check-schemas needs --out <dir>");
        return ExitCode::from(2);
    };
    match report::check_dir(dir) {
        Ok(check) => {
            if let Some(cmd) = cli.command {
                let expected = Command::from(cmd).name();
                if check.summary.command != expected {
                    eprintln!("error: {} holds a '{}' run, not '{expected}'", dir.display(), check.summary.command);
                    return ExitCode::from(2);
                }
            }
            let rows: usize = check.tables.iter().map(|t| t.1).sum();
            println!(
                "schemas ok: {} ({} run, {} tables, {rows} rows)",
                dir.display(),
                check.summary.command,
                check.tables.len()
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.check_schemas {
        return check_schemas(&cli);
    }
    let Some(cmd) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(2);
    };
    let command = Command::from(cmd);

    let mut config = match (&cli.config, cli.seed) {
        (Some(path), _) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => return fail(e),
        },
        (None, Some(seed)) => ExperimentConfig::with_seed(seed),
        (None, None) => {
            eprintln!("error: pass --config <path> or --seed <u64>; seeds are never drawn from entropy");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{command}-seed{}", config.seed)));
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1);

    match commands::run(command, &config, &out, jobs) {
        Ok(outcome) => {
            println!("{} -> {}", outcome.summary, out.display());
            if outcome.failing.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => fail(e),
    }
}
