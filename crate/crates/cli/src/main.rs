//! `signet`: offline signature verification with learned CNN features and
//! writer-dependent SVMs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "signet",
    version,
    about = "Learned-feature offline signature verification"
)]
struct Cli {
    /// Worker threads for per-image and per-user work.
    #[arg(long, global = true, env = "SIGNET_JOBS", default_value_t = 1)]
    jobs: usize,
    /// Reuse artifacts even when their config hash differs.
    #[arg(long, global = true)]
    force: bool,
    /// No progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources, applied in order: defaults, file, `--set`.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize, resize and crop every image of a dataset.
    Preprocess {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (`<root>/<dataset>`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Canvas size, `HxW`.
        #[arg(long)]
        canvas: Option<String>,
        /// Resize target, `HxW`.
        #[arg(long)]
        resize: Option<String>,
        /// Network input crop, `HxW`.
        #[arg(long)]
        crop: Option<String>,
        /// Draw random crops from this seed instead of center crops.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic signature dataset.
    GenSynthetic {
        /// Number of users.
        #[arg(long, default_value_t = 20)]
        users: u32,
        /// Genuine signatures per user.
        #[arg(long, default_value_t = 24)]
        genuine: u32,
        /// Skilled forgeries per user.
        #[arg(long, default_value_t = 30)]
        forgeries: u32,
        /// Random seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Dataset root; images go to `<out>/<name>/uNNNN/`.
        #[arg(long)]
        out: PathBuf,
        /// Dataset name under `<out>`.
        #[arg(long, default_value = "synthetic")]
        name: String,
    },
    /// Train the feature-learning CNN on the development users.
    TrainCnn {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (overrides `dataset.path`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Final checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Partial checkpoint to resume from (default `<out>.partial`).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-epoch metrics CSV (default `<out>.metrics.csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Extract FC7 features of every sample with a trained CNN.
    Extract {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (overrides `dataset.path`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained network checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the writer-dependent SVM of one user.
    TrainWd {
        #[command(flatten)]
        config: ConfigArgs,
        /// Feature file from `extract`.
        #[arg(long)]
        features: PathBuf,
        /// User whose model is trained.
        #[arg(long)]
        user: u32,
        /// Genuine references per user (when no manifest is given).
        #[arg(long)]
        refs: Option<usize>,
        /// `linear` or `rbf`.
        #[arg(long)]
        kernel: Option<String>,
        /// Weight of the negative class (overrides `wd.c_minus`).
        #[arg(long)]
        c_minus: Option<f64>,
        /// RBF width (overrides `wd.gamma`).
        #[arg(long)]
        gamma: Option<f64>,
        /// Split seed (when no manifest is given).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Split manifest fixing references and negatives.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Model file to write (`uNNNN.sgwd`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score test samples with trained writer-dependent models.
    Score {
        #[command(flatten)]
        config: ConfigArgs,
        /// Feature file from `extract`.
        #[arg(long)]
        features: PathBuf,
        /// Directory of `uNNNN.sgwd` models.
        #[arg(long)]
        models: PathBuf,
        /// Reference signatures per user (default `dataset.references`).
        #[arg(long)]
        refs: Option<usize>,
        /// Random seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Split manifest fixing references and negatives.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// `exploitation` or `validation`.
        #[arg(long, default_value = "exploitation")]
        group: String,
        /// Scores CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute FRR, FARs, EERs and AUC from a scores CSV.
    Evaluate {
        /// Scores CSV from `score`.
        #[arg(long)]
        scores: PathBuf,
        /// Scores of validation users; their EER threshold becomes global.
        #[arg(long)]
        validation_scores: Option<PathBuf>,
        /// JSON report to write.
        #[arg(long)]
        report: Option<PathBuf>,
        /// `threshold,frr,far_skilled` points for plotting.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Run every stage, resuming from artifacts in the work directory.
    Pipeline {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (overrides `dataset.path`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Master seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Work directory holding every artifact of the run.
        #[arg(long)]
        work: PathBuf,
    },
    /// Train one CNN per lambda and evaluate on the validation users.
    LambdaSweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (overrides `dataset.path`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Master seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Work directory holding every artifact of the run.
        #[arg(long)]
        work: PathBuf,
        /// `L1` or `L2`.
        #[arg(long, default_value = "L2")]
        loss: String,
        /// Comma-separated lambda values, evaluated in the given order.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1,0.95,0.99,0.999"
        )]
        lambdas: Vec<f64>,
        /// CSV table to write (also printed).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render an experiment record as a table.
    Report {
        /// `record.json` from `pipeline`.
        #[arg(long)]
        record: PathBuf,
        /// Re-serialized record with recomputed aggregates.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Scores CSV whose ROC points to dump.
        #[arg(long, requires = "roc")]
        scores: Option<PathBuf>,
        /// `threshold,frr,far_skilled` points for plotting.
        #[arg(long, requires = "scores")]
        roc: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e)
            if e.downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
