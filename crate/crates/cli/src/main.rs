//! Command-line front end for the attribute prediction pipeline. Every
//! stage reads and writes documented files in the workdir, so a run can be
//! reproduced by replaying the command sequence on the same inputs.
//!
//! Exit codes: 0 success, 1 I/O or environment failure, 2 domain error
//! (bad parameters or data).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use convattr::config::{load_config, PipelineConfig};
use convattr::pipeline::{
    cmd_baseline_bm25, cmd_build_supervision, cmd_evaluate, cmd_guess_words, cmd_predict, cmd_train, run_all,
    PipelineError, StageReport,
};
use convattr::supervision::WikiMode;

#[derive(Parser)]
#[command(name = "convattr", version, about = "Rank personal attribute values for conversation users")]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true, default_value = "convattr.toml")]
    config: PathBuf,
    /// Override paths.workdir (resolved against the current directory).
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Override train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the external resource mode: wiki-page | wiki-category.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label encyclopedia pages with attribute values (writes s_doc.jsonl).
    BuildSupervision,
    /// Mine attribute-indicative words (writes s_word.jsonl + vocabularies).
    GuessWords,
    /// Fine-tune the model on the prepared supervision files.
    Train,
    /// Rank the attribute values for every corpus user.
    Predict,
    /// Score a predictions file against the gold labels.
    Evaluate {
        /// Predictions file to score (defaults to workdir/predictions.jsonl;
        /// pass the baseline file for side-by-side comparisons).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Unsupervised BM25 baseline over the supervision documents.
    BaselineBm25,
    /// The whole pipeline in order.
    RunAll,
}

fn parse_mode(s: &str) -> Result<WikiMode, String> {
    match s {
        "wiki-page" => Ok(WikiMode::WikiPage),
        "wiki-category" => Ok(WikiMode::WikiCategory),
        other => Err(format!("unknown mode {other:?}; expected wiki-page or wiki-category")),
    }
}

fn print_header(cfg: &PipelineConfig, command: &str) {
    println!("convattr {} — {command}", env!("CARGO_PKG_VERSION"));
    println!(
        "mode: {} | backend: {} | seed: {}",
        cfg.mode,
        match cfg.backend.kind {
            convattr::config::BackendKind::Real => "real",
            convattr::config::BackendKind::Mock => "mock",
        },
        cfg.train.seed
    );
    println!(
        "guess: K={} M={} beta={} cross_vocab_threshold={} transductive={}",
        cfg.guess.k, cfg.guess.m, cfg.guess.beta, cfg.guess.cross_vocab_threshold, cfg.guess.transductive
    );
    println!(
        "train: q={} batch_size={} lr={} epochs={}",
        cfg.train.q, cfg.train.batch_size, cfg.train.lr, cfg.train.epochs
    );
    println!(
        "ablation: word_supervision={} doc_supervision={} confidence_weight={}",
        cfg.ablation.use_word_supervision, cfg.ablation.use_doc_supervision, cfg.ablation.use_confidence_weight
    );
    println!("loss: positive generalized cross entropy, per-instance term weight * (1 - p^q)/q, minimized at p = 1");
}

fn run(cli: Cli) -> Result<StageReport, PipelineError> {
    let mut cfg = load_config(&cli.config)?;
    if let Some(workdir) = cli.workdir {
        cfg.paths.workdir = workdir;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(mode) = cli.mode.as_deref() {
        cfg.mode = parse_mode(mode).map_err(PipelineError::Domain)?;
    }
    cfg.validate().map_err(PipelineError::from)?;

    let name = match &cli.command {
        Command::BuildSupervision => "build-supervision",
        Command::GuessWords => "guess-words",
        Command::Train => "train",
        Command::Predict => "predict",
        Command::Evaluate { .. } => "evaluate",
        Command::BaselineBm25 => "baseline-bm25",
        Command::RunAll => "run-all",
    };
    print_header(&cfg, name);

    match cli.command {
        Command::BuildSupervision => cmd_build_supervision(&cfg),
        Command::GuessWords => cmd_guess_words(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Predict => cmd_predict(&cfg),
        Command::Evaluate { predictions } => cmd_evaluate(&cfg, predictions.as_deref()),
        Command::BaselineBm25 => cmd_baseline_bm25(&cfg),
        Command::RunAll => run_all(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            for line in &report.lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
