//! `readmit`: synthetic data, feature selection, training, K-fold ensembles
//! and evaluation for the multimodal readmission transformer.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use readmit_core::Error;

#[derive(Parser, Debug)]
#[command(name = "readmit", version, about = "Multimodal 30-day readmission prediction")]
struct Cli {
    /// TOML run configuration ([synth], [pipeline], [model], [train], [split], [paths]); flags override it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every random stream; falls back to $PT_SEED, then the config file
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for fold- and tree-level parallelism (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Log progress to stderr (-v per-epoch, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted signal plus its .meta.json sidecar
    Synth(SynthArgs),
    /// Rank EHR columns with a random forest and keep the top k
    SelectFeatures(SelectArgs),
    /// Train one model on a patient-grouped train/val/test split
    Train(TrainArgs),
    /// Train a K-fold ensemble and score it on a held-out patient split
    Kfold(KfoldArgs),
    /// Score a model file or ensemble directory on a dataset
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output JSONL path; the sidecar goes to <out>.meta.json
    #[arg(long)]
    out: PathBuf,
    /// Number of patients
    #[arg(long)]
    patients: Option<usize>,
    /// Target fraction of positive labels
    #[arg(long)]
    positive_rate: Option<f64>,
    /// EHR columns per day
    #[arg(long)]
    d_ehr: Option<usize>,
    /// Planted informative EHR columns
    #[arg(long)]
    informative_ehr: Option<usize>,
    /// Planted informative note tokens
    #[arg(long)]
    informative_tokens: Option<usize>,
    /// Generated vocabulary size
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Logit contribution per standard deviation of each informative EHR column
    #[arg(long)]
    ehr_weight: Option<f64>,
    /// Logit contribution per standard deviation of each informative token frequency
    #[arg(long)]
    token_weight: Option<f64>,
    /// Shared latent factors behind the non-informative EHR columns
    #[arg(long)]
    noise_factors: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    /// Input JSONL dataset
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output selection JSON
    #[arg(long)]
    out: PathBuf,
    /// Number of columns to keep
    #[arg(long)]
    top_k: Option<usize>,
    /// Trees in the forest
    #[arg(long)]
    trees: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Input JSONL dataset
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Precomputed selection JSON from select-features
    #[arg(long, conflicts_with = "no_select")]
    selection: Option<PathBuf>,
    /// Keep every EHR column instead of forest selection
    #[arg(long)]
    no_select: bool,
    /// EHR columns kept when selecting on the training split
    #[arg(long)]
    top_k: Option<usize>,
    /// Comma-separated active modalities: ehr, cxr, notes
    #[arg(long, value_delimiter = ',')]
    modalities: Option<Vec<String>>,
    /// Sequence encoder: transformer, gru or lstm
    #[arg(long)]
    encoder: Option<String>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial (cosine maximum) learning rate
    #[arg(long)]
    lr_max: Option<f64>,
    /// Final (cosine minimum) learning rate
    #[arg(long)]
    lr_min: Option<f64>,
    /// Focal-loss α
    #[arg(long)]
    alpha: Option<f64>,
    /// Focal-loss γ
    #[arg(long)]
    gamma: Option<f64>,
    /// Label-smoothing factor
    #[arg(long)]
    smoothing: Option<f64>,
    /// Dropout probability
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: ModelArgs,
}

#[derive(Args, Debug)]
pub struct KfoldArgs {
    #[command(flatten)]
    common: ModelArgs,
    /// Number of folds
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Fraction of patients held out for the ensemble test
    #[arg(long, default_value_t = 0.15)]
    holdout: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model file, or a directory of fold model files scored as an ensemble
    #[arg(long)]
    model: PathBuf,
    /// Input JSONL dataset
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for report.json and roc.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::NonFiniteLoss { .. } | Error::Numeric(_) => 4,
        Error::Io(_) => 5,
        Error::Dimension(_)
        | Error::Contract(_)
        | Error::Data(_)
        | Error::Parse { .. }
        | Error::Validation(_)
        | Error::Format(_)
        | Error::Json(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    let result = commands::load_config(cli.config.as_deref(), cli.seed).and_then(|cfg| match cli.command {
        Command::Synth(a) => commands::synth(cfg, a),
        Command::SelectFeatures(a) => commands::select_features(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Kfold(a) => commands::kfold(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Validation(issues) = &e {
                for issue in issues.iter().take(20) {
                    eprintln!("  {issue}");
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
