//! `acs`: data generation, training, decoding, evaluation, and alignment inspection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use acs_core::search::BeamConfig;
use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;

/// Any `--<section>.<key> value` pair (sections: task, model, lm, train, beam,
/// paths) overrides the matching config-file entry.
#[derive(Debug, Parser)]
#[command(name = "acs", version, about = "Adaptive computation steps sequence transducer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/dev/test corpora, the vocab, and label text.
    GenData(ConfigArg),
    /// Train the acoustic model.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train the language model on label text.
    TrainLm(ConfigArg),
    /// Decode a corpus into a transcript file.
    Decode(DecodeArgs),
    /// Score a transcript file against reference labels.
    Eval {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Print the halting alignment of one utterance.
    InspectAlignment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        utterance: String,
        /// Also write the activation curve as SVG.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Config file supplying `beam.*` defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Context window; defaults to `beam.window` capped at the trained window.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    nbest: Option<usize>,
    /// Language model checkpoint for fusion.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Stream frames through the incremental decoder.
    #[arg(long, conflicts_with = "offline")]
    online: bool,
    /// Decode whole utterances at once (the default).
    #[arg(long)]
    offline: bool,
}

fn run() -> Result<()> {
    let (args, overrides) = config::extract_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    let load = |c: &ConfigArg| ExperimentConfig::load(c.config.as_deref(), &overrides);
    match cli.command {
        Command::GenData(c) => commands::gen_data(&load(&c)?),
        Command::Train { config, resume } => commands::train_model(&load(&config)?, resume),
        Command::TrainLm(c) => commands::train_language_model(&load(&c)?),
        Command::Decode(d) => {
            let cfg = ExperimentConfig::load(d.config.as_deref(), &overrides)?;
            let trained_window = commands::load_model(&d.checkpoint)?.config.decoder.window;
            let window = d.window.unwrap_or(cfg.beam.window.min(trained_window));
            let beam = BeamConfig {
                width: d.beam.unwrap_or(cfg.beam.width),
                gamma: d.gamma.unwrap_or(cfg.beam.gamma),
                window,
                nbest: d.nbest.unwrap_or(cfg.beam.nbest),
            };
            commands::decode(&commands::DecodeOptions {
                checkpoint: d.checkpoint,
                corpus: d.corpus,
                output: d.output,
                vocab: d.vocab,
                lm: d.lm,
                beam,
                online: d.online,
            })
        }
        Command::Eval { refs, hyps, vocab } => commands::eval(&refs, &hyps, &vocab).map(|_| ()),
        Command::InspectAlignment {
            checkpoint,
            corpus,
            utterance,
            svg,
        } => commands::inspect_alignment(&checkpoint, &corpus, &utterance, svg.as_deref()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
