//! Command-line driver: proposal sampling, overlap statistics, the
//! upper-bound experiment, AP evaluation, synthetic data generation,
//! training, and inference.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or data error,
//! 4 contract violation. Diagnostics go to standard error.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "boxdenoise3d", version, about = "3D box proposal denoising toolkit")]
struct Cli {
    /// Path to the run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand anchor files into grid-sampled proposal files.
    Sample {
        /// Prediction file or directory of .txt files.
        #[arg(long)]
        preds: PathBuf,
        /// Output file (for a file input) or directory.
        #[arg(long)]
        out: PathBuf,
        /// Calibration file or directory; when given, proposal 2D boxes
        /// are re-projected instead of copied from the anchor.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        range: Option<f64>,
        #[arg(long)]
        stride: Option<f64>,
    },
    /// Projection-overlap statistic over grid proposals.
    Stats {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        range: Option<f64>,
        #[arg(long)]
        stride: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        /// Report path (JSON); defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Empirical upper-bound experiment over the proposal grid.
    Upperbound {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        range: Option<f64>,
        #[arg(long)]
        stride: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional CSV row output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// 40-point interpolated AP in 3D and BEV.
    Eval {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        /// Accepted for interface parity; 3D boxes come from the label
        /// files directly.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        category: Option<String>,
        /// Restrict the report to one metric (iou3d | ioubev).
        #[arg(long)]
        metric: Option<String>,
        /// Restrict the report to one difficulty (easy | moderate | hard).
        #[arg(long)]
        difficulty: Option<String>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic KITTI-format scenes plus feature maps.
    GenSynth {
        #[arg(long, default_value = "10")]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the verification network.
    Train {
        /// KITTI-format data root (label_2/, preds/, calib/, features/).
        /// Without it, scenes come from the synthetic generator.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Refine anchor predictions with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn exit_code(err: &boxdenoise3d_core::Error) -> i32 {
    use boxdenoise3d_core::Error::*;
    match err {
        Config(_) => 2,
        Io(_) | BadTensorFile(_) | MalformedLine { .. } | MissingKey(_) | MalformedMatrix(_)
        | MissingScore(_) => 3,
        AllBehindCamera | InsufficientNeighbors { .. } | TooManyGroundTruths(..)
        | ContractViolation(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => match config::RunConfig::load(path) {
            Ok(c) => c,
            Err(msg) => {
                eprintln!("error: {msg}");
                std::process::exit(2);
            }
        },
        None => config::RunConfig::default(),
    };
    commands::init_thread_pool(&cfg);

    let result = match cli.command {
        Command::Sample {
            preds,
            out,
            calib,
            range,
            stride,
        } => commands::sample(&cfg, &preds, &out, calib.as_deref(), range, stride),
        Command::Stats {
            preds,
            calib,
            range,
            stride,
            k,
            out,
        } => commands::stats(&cfg, &preds, &calib, range, stride, k, out.as_deref()),
        Command::Upperbound {
            labels,
            preds,
            calib,
            range,
            stride,
            k,
            out,
            csv,
        } => commands::upperbound(
            &cfg,
            &labels,
            &preds,
            &calib,
            range,
            stride,
            k,
            out.as_deref(),
            csv.as_deref(),
        ),
        Command::Eval {
            labels,
            preds,
            calib: _,
            category,
            metric,
            difficulty,
            iou,
            out,
        } => commands::eval(
            &cfg,
            &labels,
            &preds,
            category,
            metric,
            difficulty,
            iou,
            out.as_deref(),
        ),
        Command::GenSynth { count, out_dir } => commands::gen_synth(&cfg, count, &out_dir),
        Command::Train { data, out_dir } => commands::train(&cfg, data.as_deref(), &out_dir),
        Command::Infer {
            checkpoint,
            preds,
            calib,
            features,
            out_dir,
        } => commands::infer(&cfg, &checkpoint, &preds, &calib, &features, &out_dir),
    };

    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
