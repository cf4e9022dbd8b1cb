use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use emlab_cli::commands::{self, error_exit_code};
use emlab_cli::{ExperimentConfig, Output};

/// Numerical laboratory for the cutoff, time-randomized Euler-Maruyama scheme
/// under singular drifts.
///
/// Every command reads one JSON configuration (all fields optional; see
/// config.schema.json). Defaults: zero drift in d = 1, T = 1, x = 0,
/// primary variant, n_list = [16, 32, 64, 128, 256, 512], n_ref = 8192,
/// grid N = 2048 (d = 1) or 256 (d = 2), L_factor = 8, M = 16,
/// c_weight = 2, seed = 1.
///
/// Exit codes: 0 success or pass, 1 runtime failure or failed criterion,
/// 2 inadmissible exponents.
#[derive(Debug, Parser)]
#[command(name = "emlab", version)]
struct Cli {
    /// Experiment configuration (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for the CSV/JSON artifacts; without it they go to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Admissibility of (d, rho, q) and the resulting alpha.
    Check,
    /// Scheme density on a grid at time t.
    Density {
        /// Number of steps.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Evaluation time in (0, T]; defaults to T.
        #[arg(long)]
        t: Option<f64>,
    },
    /// Convergence-rate study against a fine-step reference.
    Rate,
    /// Monte Carlo weak error with common random numbers.
    Mc,
    /// Verification suite for the kernel bounds and Gronwall lemmas.
    Lemmas,
    /// Terminal values of independent paths.
    Simulate {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        paths: usize,
        /// Also write the full trajectory of this stream to path.csv.
        #[arg(long)]
        trajectory: Option<u64>,
    },
}

fn emit(out: &Output, dir: Option<&PathBuf>) -> anyhow::Result<()> {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, content) in &out.files {
                let path = dir.join(name);
                std::fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
            }
            writeln!(lock, "{}", serde_json::to_string_pretty(&out.summary)?)?;
        }
        None => {
            if out.files.is_empty() {
                writeln!(lock, "{}", serde_json::to_string_pretty(&out.summary)?)?;
            }
            for (_, content) in &out.files {
                lock.write_all(content.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<Output> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let out = match &cli.command {
        Command::Check => commands::check(&cfg)?,
        Command::Density { n, t } => commands::density(&cfg, *n, *t)?,
        Command::Rate => commands::rate(&cfg)?,
        Command::Mc => commands::mc(&cfg)?,
        Command::Lemmas => commands::lemmas(&cfg)?,
        Command::Simulate { n, paths, trajectory } => commands::simulate(&cfg, *n, *paths, *trajectory)?,
    };
    if let Err(err) = emit(&out, cli.out.as_ref()) {
        // a closed stdout (e.g. piped into `head`) is not a failure
        let closed = err
            .downcast_ref::<std::io::Error>()
            .is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe);
        if !closed {
            return Err(err);
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => ExitCode::from(out.status.exit_code() as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(error_exit_code(&err) as u8)
        }
    }
}
