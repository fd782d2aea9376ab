use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cgru_cli::{cmd_rescore, cmd_score, cmd_train, cmd_translate, RunConfig, TranslateOptions};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cgru", version, about = "Attentional encoder-decoder translation with a conditional GRU decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Translate sentences with beam search.
    Translate(TranslateArgs),
    /// Print the log-probability of each target sentence given its source.
    Score(ScoreArgs),
    /// Append one model score per member to each line of an n-best list.
    Rescore(RescoreArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON or TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_source: Option<PathBuf>,
    #[arg(long)]
    train_target: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    /// ce or mrt.
    #[arg(long)]
    objective: Option<String>,
    /// sgd, adadelta, rmsprop or adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args)]
struct Models {
    /// Model archives; more than one decodes as an ensemble.
    #[arg(long = "models", required = true, num_args = 1..)]
    models: Vec<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    models: Models,
    #[arg(long, default_value_t = 5)]
    beam_size: usize,
    #[arg(long, default_value_t = 1.0)]
    length_norm: f64,
    /// Maximum output length, EOS included.
    #[arg(long, default_value_t = 100)]
    max_len: usize,
    /// Print every hypothesis as `id ||| tokens ||| scores`.
    #[arg(long)]
    nbest: bool,
    /// Write the best hypothesis' attention matrices as TSV blocks.
    #[arg(long)]
    attention_out: Option<PathBuf>,
    /// Write search graphs in DOT format.
    #[arg(long)]
    graph_out: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Source file (stdin when absent).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output file (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    models: Models,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RescoreArgs {
    #[command(flatten)]
    models: Models,
    #[arg(long)]
    source: PathBuf,
    /// n-best list (stdin when absent).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Re-sort each sentence's hypotheses by the summed new scores.
    #[arg(long)]
    resort: bool,
}

fn reader(path: &Option<PathBuf>) -> Result<Box<dyn BufRead>> {
    Ok(match path {
        Some(p) => Box::new(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?)),
        None => Box::new(io::stdin().lock()),
    })
}

fn writer(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = args.train_source {
        config.data.train_source = Some(p);
    }
    if let Some(p) = args.train_target {
        config.data.train_target = Some(p);
    }
    if let Some(d) = args.output_dir {
        config.output_dir = d;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(p) = args.patience {
        config.training.patience = p;
    }
    if let Some(e) = args.max_epochs {
        config.training.max_epochs = e;
    }
    if let Some(o) = &args.objective {
        config.set_objective(o)?;
    }
    if let Some(o) = &args.optimizer {
        config.set_optimizer(o)?;
    }
    cmd_train(&config)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(args),
        Command::Translate(a) => {
            let opts = TranslateOptions {
                models: a.models.models,
                beam: cgru::decoding::BeamConfig {
                    beam_size: a.beam_size,
                    max_len: a.max_len,
                    length_norm: a.length_norm,
                },
                nbest: a.nbest,
                attention_out: a.attention_out,
                graph_out: a.graph_out,
                threads: a.threads,
            };
            cmd_translate(&opts, reader(&a.input)?, writer(&a.output)?)
        }
        Command::Score(a) => cmd_score(&a.models.models, &a.source, &a.target, writer(&a.output)?),
        Command::Rescore(a) => cmd_rescore(&a.models.models, &a.source, reader(&a.input)?, a.resort, writer(&a.output)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
