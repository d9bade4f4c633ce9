mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

/// Cascaded diffusion completion of longitudinal 3D volume series:
/// synthetic cohorts, two-stage training, missing-timepoint completion,
/// metrics, and growth-trajectory analysis.
#[derive(Parser)]
#[command(name = "cascade-volcomp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to a TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override (takes precedence over the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker thread cap; 1 (the default) for bit-reproducible runs.
    /// Per-scan work is deterministic per scan, so results are identical
    /// at any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overwrite existing outputs where a command would otherwise refuse.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal cohort with held-out timepoints.
    Phantom,
    /// Train one cascade stage (config key `stage = "generate" | "sr"`).
    Train,
    /// Complete missing timepoints with trained checkpoints.
    Complete,
    /// Score completed scans against ground truth (PSNR / SSIM).
    Eval,
    /// Segment, measure tissue volumes, and fit growth trajectories.
    Trajectory,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("CASCADE_VOLCOMP_LOG", "info"),
    )
    .format_timestamp(None)
    .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, everything else is
            // a usage error (exit 1).
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let mut cfg = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out_dir = cli.out.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }

    let threads = cfg.threads.unwrap_or(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: failed to configure {threads} worker threads: {e}");
        return ExitCode::from(1);
    }

    let result = match cli.command {
        Command::Phantom => commands::cmd_phantom(&cfg, cli.force),
        Command::Train => commands::cmd_train(&cfg),
        Command::Complete => commands::cmd_complete(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Trajectory => commands::cmd_trajectory(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code_for(&e))
        }
    }
}
