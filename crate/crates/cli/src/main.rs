//! `bleedseg`: data generation, preprocessing, training, prediction and
//! evaluation for the volumetric segmentation engine.

mod commands;
mod run;

use std::ops::RangeInclusive;
use std::path::PathBuf;
use std::process::ExitCode;

use bleedseg_core::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bleedseg", version, about = "Volumetric U-shaped CNN segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic head phantoms and a manifest with a 70/15/15 split.
    GenData {
        /// Phantom spec (JSON); defaults to the four-class desk spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// Extents for the default spec, e.g. 48 or 48,40,40.
        #[arg(long, value_parser = parse_extents, default_value = "48")]
        extents: [usize; 3],
    },
    /// Applies a preprocessing pipeline to every volume of a manifest.
    Preprocess {
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        in_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a model, logging the loss per step and checkpointing.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Trains every hyperparameter cell and writes the ranked results.
    Gridsearch {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Tiled whole-volume prediction for one VVOL file or a manifest.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Input tile extents; defaults to the largest valid tile up to 96.
        #[arg(long, value_parser = parse_extents)]
        tile: Option<[usize; 3]>,
    },
    /// Computes the metrics report for predictions against ground truth.
    Eval {
        #[arg(long)]
        pred_manifest: PathBuf,
        #[arg(long)]
        truth_manifest: PathBuf,
        /// Output file; `.csv` writes the class table, anything else JSON.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 2)]
        decimals: usize,
    },
    /// Runs the 64-bit finite-difference gradient suite.
    Gradcheck {
        /// Suite options (JSON); defaults to the standard suite.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sampled parameters per whole-network check.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Prints the valid input/output tile extents in a range.
    Shapes {
        /// Model config (JSON); defaults to the canonical configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        conv_kernel: Option<usize>,
        #[arg(long)]
        pool_kernel: Option<usize>,
        /// Inclusive range such as 44..64.
        #[arg(long, value_parser = parse_range)]
        range: RangeInclusive<usize>,
    },
}

fn parse_extents(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err("expected one extent or three comma-separated extents".into()),
    }
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("{s:?} is not of the form LO..HI"))?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let lo = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let hi = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
    Ok(lo..=hi)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Numerical(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData {
            spec,
            out,
            count,
            seed,
            extents,
        } => commands::gen_data(spec.as_deref(), &out, count, seed, extents),
        Command::Preprocess {
            pipeline,
            in_manifest,
            out,
        } => commands::preprocess(&pipeline, &in_manifest, &out),
        Command::Train { config, resume } => commands::train(&config, resume.as_deref()),
        Command::Gridsearch { grid, config } => commands::gridsearch(&grid, &config),
        Command::Predict {
            checkpoint,
            input,
            out,
            tile,
        } => commands::predict(&checkpoint, &input, &out, tile),
        Command::Eval {
            pred_manifest,
            truth_manifest,
            report,
            decimals,
        } => commands::eval(&pred_manifest, &truth_manifest, &report, decimals),
        Command::Gradcheck { config, samples } => commands::gradcheck(config.as_deref(), samples),
        Command::Shapes {
            config,
            depth,
            conv_kernel,
            pool_kernel,
            range,
        } => commands::shapes(config.as_deref(), depth, conv_kernel, pool_kernel, range),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
