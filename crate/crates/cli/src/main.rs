//! Command-line front end: synthesize or ingest data, train, evaluate and
//! predict flight spans.

mod data;
mod eval;
mod failure;
mod settings;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use failure::CliResult;

#[derive(Parser)]
#[command(
    name = "airtime",
    version,
    about = "Jump detection and air-time measurement from pose sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random choice of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Also write pose-estimator files and an annotation list here.
        #[arg(long)]
        export_poses: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Build a dataset from pose-estimator output and flight annotations.
    Ingest {
        /// JSON lines: video_id, category, fps, flights, optional poses file.
        #[arg(long)]
        annotations: PathBuf,
        /// Directory holding the pose files.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from scratch.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Initialize from a checkpoint's backbone and train a new head.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score checkpoints on datasets.
    Eval {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        /// One column per category plus an overall column.
        #[arg(long)]
        by_category: bool,
        /// Score the gold labels against themselves.
        #[arg(long)]
        oracle: bool,
        /// Write every metric as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write one JSON line per video with predicted and gold tags.
        #[arg(long)]
        dump_predictions: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Tag new sequences and report flights with air times.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset in the JSON-lines format.
        #[arg(long, conflicts_with = "poses")]
        input: Option<PathBuf>,
        /// Pose-estimator output for one video.
        #[arg(long)]
        poses: Option<PathBuf>,
        /// Frame rate of the video given by --poses.
        #[arg(long)]
        fps: Option<f64>,
        #[arg(long)]
        video_id: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Summarize a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Fixed embedding table (required when embedding = fixed).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn train_args<'a>(run: &'a RunArgs, base: Option<&'a PathBuf>) -> train::TrainArgs<'a> {
    train::TrainArgs {
        data: &run.data,
        out: &run.out,
        config: run.common.config.as_deref(),
        set: &run.common.set,
        seed: run.common.seed,
        loss_log: run.loss_log.as_deref(),
        embeddings: run.embeddings.as_deref(),
        base: base.map(PathBuf::as_path),
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth {
            out,
            export_poses,
            common,
        } => data::synth(data::SynthArgs {
            out,
            config: common.config.as_deref(),
            set: &common.set,
            seed: common.seed,
            export_poses: export_poses.as_deref(),
        }),
        Command::Ingest {
            annotations,
            poses,
            out,
        } => data::ingest(annotations, poses, out),
        Command::Train { run } => train::run(train_args(run, None)),
        Command::Finetune { base, run } => train::run(train_args(run, Some(base))),
        Command::Eval {
            checkpoints,
            data,
            by_category,
            oracle,
            report,
            dump_predictions,
            embeddings,
        } => eval::eval(eval::EvalArgs {
            checkpoints,
            data,
            by_category: *by_category,
            oracle: *oracle,
            report: report.as_deref(),
            dump_predictions: dump_predictions.as_deref(),
            embeddings: embeddings.as_deref(),
        }),
        Command::Predict {
            checkpoint,
            input,
            poses,
            fps,
            video_id,
            out,
            embeddings,
        } => eval::predict(eval::PredictArgs {
            checkpoint,
            input: input.as_deref(),
            poses: poses.as_deref(),
            fps: *fps,
            video_id: video_id.as_deref(),
            out: out.as_deref(),
            embeddings: embeddings.as_deref(),
        }),
        Command::Stats { data, json } => data::stats(data, *json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
