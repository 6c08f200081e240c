//! Batch command-line front end.
//!
//! Every command is driven by a single JSON config document; the `--out`
//! and `--seed` flags override the corresponding top-level config fields.
//! Exit codes: 0 success (and criteria PASS), 1 usage error, 2 criteria
//! FAIL. `ECP_THREADS` caps parallelism across (seed, alpha) cells.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::load_config;

#[derive(Parser)]
#[command(name = "ecp", about = "Split conformal prediction with entropy bounds", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON configuration document.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory/path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (or convert a file) to columnar form.
    GenData(ConfigArgs),
    /// Fit a conformal threshold and write it as JSON.
    Calibrate(ConfigArgs),
    /// Coverage/inefficiency over a seed list, reported mean±std per alpha.
    Evaluate(ConfigArgs),
    /// Entropy upper bounds with per-term breakdowns, one row per alpha.
    Bounds {
        #[command(flatten)]
        args: ConfigArgs,
        /// Print values in bits instead of nats (files stay in nats).
        #[arg(long)]
        bits: bool,
    },
    /// Quantized set-size lower bounds against the empirical run.
    Setsize(ConfigArgs),
    /// Train a classifier (cross-entropy or a conformal-training loss).
    Train(ConfigArgs),
    /// Side-information evaluation across availability levels.
    Sideinfo(ConfigArgs),
    /// Federated averaging simulation with per-round reports.
    FedTrain(ConfigArgs),
    /// Run one acceptance criterion (or "all") and print PASS/FAIL.
    Repro {
        /// Criterion id, or "all".
        criterion: String,
        /// Directory with the four MNIST IDX files (mnist-ce only);
        /// defaults to ECP_MNIST_DIR.
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::GenData(args) => {
            let mut cfg: config::GenDataConfig = load_config(&args.config)?;
            if let Some(out) = args.out {
                cfg.out = out;
            }
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            commands::gen_data(&cfg).map_err(|e| e.to_string())?;
        }
        Command::Calibrate(args) => {
            let mut cfg: config::CalibrateConfig = load_config(&args.config)?;
            if let Some(out) = args.out {
                cfg.out = out;
            }
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            commands::run_calibrate(&cfg).map_err(|e| e.to_string())?;
        }
        Command::Evaluate(args) => {
            let mut cfg: config::EvaluateConfig = load_config(&args.config)?;
            if let Some(out) = args.out {
                cfg.out_dir = out;
            }
            if let Some(seed) = args.seed {
                cfg.seeds = vec![seed];
            }
            commands::run_evaluate(&cfg).map_err(|e| e.to_string())?;
        }
        Command::Bounds { args, bits } => {
            let mut cfg: config::BoundsConfig = load_config(&args.config)?;
            if let Some(out) = args.out {
                cfg.out_dir = out;
            }
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            commands::run_bounds(&cfg, bits).map_err(|e| e.to_string())?;
        }
        Command::Setsize(args) => {
            let mut cfg: config::SetsizeConfig = load_config(&args.config)?;
            if let Some(out) = args.out {
                cfg.out_dir = out;
            }
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            commands::run_setsize(&cfg).map_err(|e| e.to_string())?;
        }
        Command::Train(args) => {
            let mut cfg: config::TrainCommandConfig = load_config(&args.config)?;
            if let Some(out) = args.out {
                cfg.out_dir = out;
            }
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            commands::run_train(&cfg).map_err(|e| e.to_string())?;
        }
        Command::Sideinfo(args) => {
            let mut cfg: config::SideInfoConfig = load_config(&args.config)?;
            if let Some(out) = args.out {
                cfg.out_dir = out;
            }
            if let Some(seed) = args.seed {
                cfg.seeds = vec![seed];
            }
            commands::run_sideinfo(&cfg).map_err(|e| e.to_string())?;
        }
        Command::FedTrain(args) => {
            let mut cfg: config::FedTrainConfig = load_config(&args.config)?;
            if let Some(out) = args.out {
                cfg.out_dir = out;
            }
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            commands::run_fed_train(&cfg).map_err(|e| e.to_string())?;
        }
        Command::Repro { criterion, mnist_dir } => {
            let dir = mnist_dir.or_else(|| std::env::var_os("ECP_MNIST_DIR").map(PathBuf::from));
            let pass = commands::run_repro(&criterion, dir.as_deref()).map_err(|e| e.to_string())?;
            return Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(2) });
        }
    }
    Ok(ExitCode::SUCCESS)
}
