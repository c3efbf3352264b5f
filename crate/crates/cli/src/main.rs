//! Command-line front end: synth | fit | render | metrics | apps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// Environment variable that fixes the worker-thread count.
const THREADS_ENV: &str = "VOLMEDIA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "volmedia", version, about = "Scene fitting and rendering through participating media")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct Common {
    /// Project configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to a sub-folder of paths.output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum App {
    /// Medium volume seen by orthographic views.
    Volume,
    /// Re-render with rescaled downwelling depth.
    DepthScale,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the ground-truth scene of the config into a dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the scene model to a dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Replaces the configured number of steps.
        #[arg(long)]
        steps_override: Option<usize>,
    },
    /// Render every dataset view from a checkpoint.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// PSNR/SSIM between same-named PFM images of two directories.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// Optional CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Downstream applications on a fitted checkpoint.
    Apps {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        app: App,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<(), volmedia::Error> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| volmedia::Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| volmedia::Error::Internal(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Synth { common } => commands::synth(&common),
        Command::Fit { common, steps_override } => commands::fit(&common, steps_override),
        Command::Render { common, checkpoint } => commands::render(&common, checkpoint),
        Command::Metrics { a, b, out } => commands::metrics(&a, &b, out),
        Command::Apps { common, app, checkpoint } => commands::apps(&common, app, checkpoint),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
