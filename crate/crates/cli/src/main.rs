//! `ipt`: prepare corpora, train, evaluate, predict and compare runs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ipt_core::dataset::{DatasetSchema, SplitTag};
use ipt_core::metrics::Aggregation;

#[derive(Parser)]
#[command(name = "ipt", version, about = "Instrument playing technique detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a raw dataset into annotation CSVs, split manifests and stats.
    Prepare {
        #[arg(long, value_parser = parse_schema)]
        dataset: DatasetSchema,
        /// Raw dataset root.
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Toy schema only: first write a synthetic raw corpus with
        /// TRAIN,VAL,TEST recordings of `--seconds` each under `--root`.
        #[arg(long, value_name = "TRAIN,VAL,TEST")]
        synthesize: Option<String>,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
    },
    /// Finetune a model as described by a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        fold: Option<usize>,
        /// Overrides `output_dir`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overrides `train.max_steps`.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Extra `key=value` overrides, e.g. `train.epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score a checkpoint on one split of a prepared corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prepared corpus; defaults to `data.corpus` of `--config`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: SplitTag,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Onset tolerance in seconds.
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
        /// Report JSON path; also writes `<stem>_per_class.{png,csv}`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Detect techniques in one audio file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        /// Output directory for `events.csv` and posterior matrices.
        #[arg(long)]
        output: PathBuf,
        /// Skip writing the posterior matrices.
        #[arg(long)]
        no_posteriors: bool,
    },
    /// Tabulate evaluation reports and draw per-class histograms.
    Report {
        /// EvalReport JSON files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Row names, comma separated (default: report variant or file stem).
        #[arg(long, value_delimiter = ',')]
        names: Vec<String>,
        /// Combine all reports as cross-validation folds into one row.
        #[arg(long, value_parser = parse_aggregation)]
        aggregate: Option<Aggregation>,
    },
}

fn parse_schema(s: &str) -> Result<DatasetSchema, String> {
    s.parse().map_err(|e: ipt_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitTag, String> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(SplitTag::Train),
        "val" | "valid" | "validation" => Ok(SplitTag::Val),
        "test" => Ok(SplitTag::Test),
        _ => Err(format!("unknown split `{s}` (train, val, test)")),
    }
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    match s {
        "mean" | "mean_of_folds" => Ok(Aggregation::MeanOfFolds),
        "pooled" | "pooled_folds" => Ok(Aggregation::PooledFolds),
        _ => Err(format!("unknown aggregation `{s}` (mean_of_folds, pooled_folds)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare {
            dataset,
            root,
            output,
            seed,
            synthesize,
            seconds,
        } => commands::prepare(dataset, &root, &output, seed, synthesize.as_deref(), seconds),
        Command::Train {
            config,
            variant,
            fold,
            output,
            max_steps,
            set,
        } => commands::train(&config, variant, fold, output, max_steps, &set),
        Command::Evaluate {
            checkpoint,
            corpus,
            config,
            split,
            fold,
            tolerance,
            output,
        } => commands::evaluate(&checkpoint, corpus, config, split, fold, tolerance, output),
        Command::Predict {
            checkpoint,
            audio,
            output,
            no_posteriors,
        } => commands::predict(&checkpoint, &audio, &output, !no_posteriors),
        Command::Report {
            reports,
            output,
            names,
            aggregate,
        } => commands::report(&reports, &output, &names, aggregate),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
