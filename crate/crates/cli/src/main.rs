//! Command-line front end for the varmt toolkit.
//!
//! Exit codes: 0 on success, 1 on a command-line usage error, 2 on a data
//! or configuration problem, 3 on a numeric failure (diverged training,
//! non-finite scores). Logging goes to stderr; verbosity comes only from
//! `-v` flags, never from environment variables.

mod config;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Parser, Subcommand};

use varmt::corpus::Variety;
use varmt::{Error, Result};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "varmt", version, about = "Translation into closely related language varieties")]
struct Cli {
    /// Run configuration in TOML; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides the seed from the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Caps internal parallelism; 1 is fully sequential, 0 uses all cores.
    /// Results never depend on this value.
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    threads: usize,

    /// Directory the stage writes its artifacts into.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Increases log verbosity (repeatable: -v debug, -vv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generates a synthetic two-variety dataset, its ground-truth variant
    /// table, and a subword model.
    Synth,
    /// Ingests, length-filters, and partitions the corpora from
    /// [data.files], then fits the subword model.
    Prepare,
    /// Trains the five-member variety classifier ensemble on the labeled
    /// target sides.
    TrainClassifier {
        /// Dataset directory written by prepare or synth.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Labels the unlabeled pool with a trained classifier.
    Label {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Classifier ensemble file.
        #[arg(long, value_name = "FILE")]
        classifier: PathBuf,
        /// mc2 always assigns a variety; mc3 may abstain.
        #[arg(long, value_name = "MODE")]
        mode: String,
    },
    /// Builds the training set for the configured recipe.
    BuildDataset {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        subword: PathBuf,
        /// Required by the auto-labeling recipes (mc2, mc3).
        #[arg(long, value_name = "FILE")]
        classifier: Option<PathBuf>,
    },
    /// Trains the translation model on a built training set.
    TrainNmt {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Training-set directory from build-dataset.
        #[arg(long = "train-set", value_name = "DIR")]
        train_set: PathBuf,
        #[arg(long, value_name = "FILE")]
        subword: PathBuf,
    },
    /// Translates a file of sentences, one per line.
    Translate {
        /// Model checkpoint.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        subword: PathBuf,
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Target variety (a or b) for token-forced models.
        #[arg(long, value_name = "VARIETY")]
        variety: Option<String>,
    },
    /// Decodes the test sets and reports BLEU and variety consistency.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        subword: PathBuf,
        /// Variant table for exact consistency scoring.
        #[arg(long, value_name = "FILE")]
        table: Option<PathBuf>,
        /// Classifier ensemble for soft-fusion consistency scoring.
        #[arg(long, value_name = "FILE")]
        classifier: Option<PathBuf>,
    },
    /// Paired-bootstrap significance between two systems' outputs.
    Significance {
        /// Tokenized output of the first system, one sentence per line.
        #[arg(long = "system-x", value_name = "FILE")]
        system_x: PathBuf,
        /// Tokenized output of the second system.
        #[arg(long = "system-y", value_name = "FILE")]
        system_y: PathBuf,
        /// Tokenized references shared by both systems.
        #[arg(long, value_name = "FILE")]
        refs: PathBuf,
    },
    /// Runs the full chain: data, classifier (when the recipe needs one),
    /// training set, model, evaluation.
    Pipeline,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3u8 } else { 2u8 })
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    // filter_level only: RUST_LOG and friends are deliberately ignored.
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn parse_variety(s: &str) -> Result<Variety> {
    match s {
        "a" | "A" => Ok(Variety::A),
        "b" | "B" => Ok(Variety::B),
        other => Err(Error::Config(format!("unknown variety {other:?}; expected a or b"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    let (mut cfg, config_root) = match &cli.config {
        Some(path) => {
            let root = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
            (RunConfig::load(path)?, root)
        }
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out_dir = cli
        .out_dir
        .ok_or_else(|| Error::Config("this command needs --out-dir".into()));

    match cli.command {
        Command::Synth => stages::run_synth(&cfg, &out_dir?),
        Command::Prepare => stages::run_prepare(&cfg, &config_root, &out_dir?),
        Command::TrainClassifier { data } => stages::run_train_classifier(&cfg, &data, &out_dir?),
        Command::Label { data, classifier, mode } => {
            stages::run_label(&cfg, &data, &classifier, &mode, &out_dir?)
        }
        Command::BuildDataset { data, subword, classifier } => {
            stages::run_build_dataset(&cfg, &data, &subword, classifier.as_deref(), &out_dir?)
        }
        Command::TrainNmt { data, train_set, subword } => {
            stages::run_train_nmt(&cfg, &data, &train_set, &subword, &out_dir?)
        }
        Command::Translate { model, subword, input, variety } => {
            let variety = variety.as_deref().map(parse_variety).transpose()?;
            stages::run_translate(&cfg, &model, &subword, &input, variety, &out_dir?)
        }
        Command::Evaluate { data, model, subword, table, classifier } => stages::run_evaluate(
            &cfg,
            &data,
            &model,
            &subword,
            table.as_deref(),
            classifier.as_deref(),
            &out_dir?,
        ),
        Command::Significance { system_x, system_y, refs } => {
            stages::run_significance(&cfg, &system_x, &system_y, &refs, &out_dir?)
        }
        Command::Pipeline => stages::run_pipeline(&cfg, &config_root, &out_dir?),
    }
}
