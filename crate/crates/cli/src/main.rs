use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stgrape_cli::{commands, CliError, RunConfig};

/// Robust pulse design for open spin chains.
///
/// Frequencies in config and pulse files are in MHz (f = omega / 2 pi) and are
/// converted to rad/ns internally; times are in ns, coherence times in us.
///
/// Exit codes: 0 success, 2 configuration or input error, 3 numerical failure
/// (non-finite objective), 1 anything else.
#[derive(Parser, Debug)]
#[command(name = "stgrape", version, about, long_about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for sweeps and gate synthesis.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Propagate a pulse with each configured backend and compare them.
    Simulate {
        /// Pulse CSV (t_ns,u_1,..) in MHz; a seeded random pulse otherwise.
        #[arg(long)]
        pulse: Option<PathBuf>,
    },
    /// Optimize a pulse with GRAPE or ST-GRAPE.
    Optimize,
    /// Score a pulse against sampled uncertainty parameters.
    Sweep {
        #[arg(long)]
        pulse: Option<PathBuf>,
    },
    /// Time single propagation steps across chain lengths and backends.
    Benchmark,
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => return Err(CliError::Config("missing --config".into())),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Simulate { pulse } => commands::simulate(&cfg, &cli.out, pulse.as_deref()),
        Command::Optimize => commands::optimize(&cfg, &cli.out),
        Command::Sweep { pulse } => commands::sweep(&cfg, &cli.out, pulse.as_deref()),
        Command::Benchmark => commands::benchmark(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
