//! `qajudge`: build evaluation data, train judges, and score QA systems.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::{Alpha, JudgeKind, RunConfig, SyntheticKind};

#[derive(Debug, Parser)]
#[command(name = "qajudge", version, about = "Automatic evaluation of question-answering systems")]
struct Cli {
    /// Seed for every random choice (data generation, initialisation, shuffling, splits).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration file; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Label corpus sentences and build judge tuples, or generate synthetic data.
    BuildData(BuildDataArgs),
    /// Train an encoder-based or linear judge on tuple files.
    Train(TrainArgs),
    /// Point-wise precision/recall/F1 of a judge on labelled tuples.
    EvalPointwise(EvalPointwiseArgs),
    /// System-wise estimates compared with gold judgements.
    EvalSystem(EvalSystemArgs),
    /// Render a saved report, or compare per-system values from a file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct BuildDataArgs {
    /// Machine-reading documents (JSON lines).
    #[arg(long, conflicts_with = "synthetic")]
    corpus: Option<PathBuf>,
    /// Generate synthetic data instead of reading a corpus.
    #[arg(long, value_enum)]
    synthetic: Option<SyntheticKind>,
    /// Number of synthetic questions.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Args)]
struct JudgeArgs {
    #[arg(long, value_enum)]
    judge: Option<JudgeKind>,
    /// Trained judge to load (bundle directory, or linear model file).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// `model` or `linear`.
    #[arg(long, value_enum)]
    judge: Option<JudgeKind>,
    /// A0, A1 or A2.
    #[arg(long)]
    family: Option<String>,
    /// Text pairs such as `r,q+t`; repeat for several pairs.
    #[arg(long = "pair")]
    pairs: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalPointwiseArgs {
    #[arg(long)]
    tuples: Option<PathBuf>,
    #[command(flatten)]
    judge: JudgeArgs,
}

#[derive(Debug, Args)]
struct EvalSystemArgs {
    /// System runs (JSON lines).
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Reference answers with gold labels (JSON lines).
    #[arg(long)]
    references: Option<PathBuf>,
    /// Decision threshold, or `tune` to calibrate on a seeded dev split.
    #[arg(long)]
    alpha: Option<Alpha>,
    #[arg(long)]
    dev_fraction: Option<f64>,
    #[command(flatten)]
    judge: JudgeArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// `system.json` or `pointwise.json` from an earlier run, or JSON lines of
    /// `{system_id, judged, gold}`.
    #[arg(long)]
    input: PathBuf,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    let set_judge = |cfg: &mut RunConfig, j: &JudgeArgs| {
        if let Some(k) = j.judge {
            cfg.model.judge = k;
        }
        if let Some(p) = &j.model {
            cfg.model.path = Some(p.clone());
        }
    };
    match &cli.command {
        Command::BuildData(a) => {
            if let Some(c) = &a.corpus {
                cfg.data.corpus = Some(c.clone());
                cfg.data.synthetic = None;
            }
            if let Some(s) = a.synthetic {
                cfg.data.synthetic = Some(s);
                cfg.data.corpus = None;
            }
            if let Some(n) = a.size {
                cfg.data.size = n;
            }
        }
        Command::Train(a) => {
            if let Some(p) = &a.train {
                cfg.train.train = Some(p.clone());
            }
            if let Some(p) = &a.dev {
                cfg.train.dev = Some(p.clone());
            }
            if let Some(k) = a.judge {
                cfg.model.judge = k;
            }
            if let Some(f) = &a.family {
                cfg.model.family = f.clone();
            }
            if !a.pairs.is_empty() {
                cfg.model.pairs = a.pairs.clone();
            }
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.learning_rate {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = a.weight_decay {
                cfg.train.weight_decay = v;
            }
        }
        Command::EvalPointwise(a) => {
            if let Some(p) = &a.tuples {
                cfg.eval.tuples = Some(p.clone());
            }
            set_judge(&mut cfg, &a.judge);
        }
        Command::EvalSystem(a) => {
            if let Some(p) = &a.runs {
                cfg.eval.runs = Some(p.clone());
            }
            if let Some(p) = &a.references {
                cfg.eval.references = Some(p.clone());
            }
            if let Some(v) = a.alpha {
                cfg.eval.alpha = v;
            }
            if let Some(v) = a.dev_fraction {
                cfg.eval.dev_fraction = v;
            }
            set_judge(&mut cfg, &a.judge);
        }
        Command::Report(_) => {}
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let name = match &cli.command {
        Command::BuildData(_) => "build-data",
        Command::Train(_) => "train",
        Command::EvalPointwise(_) => "eval-pointwise",
        Command::EvalSystem(_) => "eval-system",
        Command::Report(_) => "report",
    };
    let result = match &cli.command {
        Command::BuildData(_) => commands::build_data(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::EvalPointwise(_) => commands::eval_pointwise(&cfg),
        Command::EvalSystem(_) => commands::eval_system(&cfg),
        Command::Report(a) => commands::report(&cfg, &a.input),
    };
    commands::log_run(&cfg.out, name, &result);
    result
}
