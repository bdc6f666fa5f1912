use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hmg::decoder::PredictionSet;
use hmg::model::checkpoint::Checkpoint;
use hmg::pipeline::{self, Artifacts, PipelineError, RunConfig};
use hmg::plc::build_level_masks;

/// Hierarchical multi-label generation with per-level vocabulary masks.
#[derive(Parser)]
#[command(name = "hmg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic taxonomy, training corpus and held-out corpus.
    Synth(Common),
    /// Train the label BPE and document word list; writes `vocab`.
    BuildVocab(Common),
    /// Build per-level vocabulary masks; writes `masks`.
    BuildMasks(Common),
    /// Train a model on `corpus`; writes `checkpoint`.
    Train(Common),
    /// Tag a corpus (default `eval_corpus`); writes `predictions`.
    Tag {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score `predictions` against a gold corpus (default `eval_corpus`).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Place new label names in the taxonomy. Without `--text`, the
    /// discovery candidates in `predictions` are placed.
    Place {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        text: Vec<String>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c) | Command::BuildVocab(c) | Command::BuildMasks(c) | Command::Train(c) => c,
            Command::Tag { common, .. } | Command::Eval { common, .. } | Command::Place { common, .. } => common,
        }
    }
}

fn synth(cfg: &RunConfig) -> Result<(), PipelineError> {
    let data = pipeline::synth_dataset(&cfg.synth_spec())?;
    let (train, held) = pipeline::split_holdout(data.corpus, cfg.holdout_fraction);
    pipeline::write(&cfg.taxonomy, &data.taxonomy.to_tsv())?;
    pipeline::write(&cfg.corpus, &pipeline::corpus_to_jsonl(&train))?;
    pipeline::write(&cfg.eval_corpus, &pipeline::corpus_to_jsonl(&held))?;
    println!(
        "{} labels, {} training and {} held-out documents",
        data.taxonomy.len(),
        train.len(),
        held.len()
    );
    Ok(())
}

fn build_vocab(cfg: &RunConfig) -> Result<(), PipelineError> {
    let t = pipeline::read_taxonomy(&cfg.taxonomy)?;
    let corpus = pipeline::read_corpus(&cfg.corpus)?;
    let v = pipeline::build_vocabulary(&t, &corpus, cfg.bpe_vocab_size, cfg.min_word_freq)?;
    pipeline::write(&cfg.vocab, &v.to_file_string())?;
    println!("vocabulary size {} hash {}", v.size(), v.hash());
    Ok(())
}

fn build_masks(cfg: &RunConfig) -> Result<(), PipelineError> {
    let t = pipeline::read_taxonomy(&cfg.taxonomy)?;
    let v = pipeline::read_vocab(&cfg.vocab)?;
    if !cfg.vocab_hash.is_empty() {
        pipeline::check_hash("config vocab_hash", &cfg.vocab_hash, &v)?;
    }
    let (masks, warnings) = build_level_masks(&t, &v);
    for w in &warnings {
        log::warn!("label {} at level {} encodes to an unknown token", w.label_id, w.level);
    }
    pipeline::write(&cfg.masks, &pipeline::masks_to_file_string(&masks, &v.hash()))?;
    for k in 0..=t.max_level() {
        let allowed = masks.mask(k).map_or(0, |m| m.iter().filter(|&&b| b).count());
        println!("level {k}: {allowed} of {} tokens allowed", masks.vocab_size());
    }
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<(), PipelineError> {
    let t = pipeline::read_taxonomy(&cfg.taxonomy)?;
    let corpus = pipeline::read_corpus(&cfg.corpus)?;
    let v = pipeline::read_vocab(&cfg.vocab)?;
    let out = pipeline::train(cfg, &t, &corpus, &v)?;
    pipeline::write(&cfg.checkpoint, &Checkpoint::from_params(&out.params, &v.hash()).to_json())?;
    for (i, l) in out.epoch_losses.iter().enumerate() {
        println!("epoch {}: loss {l:.6}", i + 1);
    }
    Ok(())
}

fn tag(cfg: &RunConfig, input: Option<&Path>) -> Result<(), PipelineError> {
    let a = Artifacts::load(cfg)?;
    let gen = cfg.generation(a.taxonomy.max_level())?;
    let records = pipeline::read_corpus(input.unwrap_or(&cfg.eval_corpus))?;
    let preds = a.tag_all(&records, &gen);
    let failed = preds.iter().filter(|p| !p.diagnostics.is_empty()).count();
    pipeline::write(&cfg.predictions, &pipeline::predictions_to_jsonl(&records, &preds, &a.vocab.hash()))?;
    println!("tagged {} documents ({failed} with diagnostics)", records.len());
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<(String, PredictionSet)>, PipelineError> {
    pipeline::parse_predictions(&pipeline::read(path)?, path)
}

fn eval(cfg: &RunConfig, gold: Option<&Path>) -> Result<(), PipelineError> {
    let t = pipeline::read_taxonomy(&cfg.taxonomy)?;
    let preds = read_predictions(&cfg.predictions)?;
    let gold = pipeline::read_corpus(gold.unwrap_or(&cfg.eval_corpus))?;
    let report = pipeline::evaluate(&preds, &gold, &t)?;
    pipeline::write(&cfg.metrics, &report.to_json())?;
    print!("{}\n{}", report.render_table(), report.render_count_table());
    Ok(())
}

fn place(cfg: &RunConfig, names: &[String]) -> Result<(), PipelineError> {
    let a = Artifacts::load(cfg)?;
    let names = if names.is_empty() {
        pipeline::discovery_texts(&read_predictions(&cfg.predictions)?)
    } else {
        names.to_vec()
    };
    let (placed, skipped) = pipeline::place(&names, &a);
    for (name, reason) in &skipped {
        log::warn!("{name:?} not placed: {reason}");
    }
    pipeline::write(&cfg.placements, &pipeline::placements_to_jsonl(&placed))?;
    for p in &placed {
        println!("{}\tparent {}\tlevel {}", p.new_label, p.parent_id, p.assigned_level);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let common = cli.command.common();
    let cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    match &cli.command {
        Command::Synth(_) => synth(&cfg),
        Command::BuildVocab(_) => build_vocab(&cfg),
        Command::BuildMasks(_) => build_masks(&cfg),
        Command::Train(_) => train(&cfg),
        Command::Tag { input, .. } => tag(&cfg, input.as_deref()),
        Command::Eval { gold, .. } => eval(&cfg, gold.as_deref()),
        Command::Place { text, .. } => place(&cfg, text),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HMG_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
