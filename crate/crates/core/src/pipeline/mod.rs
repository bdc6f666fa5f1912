//! End-to-end glue: corpus files, vocabulary and mask artifacts, training,
//! tagging, evaluation and placement.
//!
//! Artifacts that are combined at run time carry the hash of the vocabulary
//! they were built against, and every combination is checked before work
//! starts.

pub mod config;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{train_bpe, LabelVocabulary, TokenId, BOS, EOS, SEP};
use crate::decoder::{tag_document, Diagnostic, GenerationConfig, PredictionSet};
use crate::discovery::{propose_placement, Placement};
use crate::eval::{evaluate as evaluate_sets, GoldSet, MetricsReport};
use crate::model::checkpoint::Checkpoint;
use crate::model::optim::MomentumSgd;
use crate::model::{self, Document, Episode, ModelError, ModelParams, TrainingExample};
use crate::plc::{build_level_masks, LevelMaskSet};
use crate::taxonomy::Taxonomy;
pub use config::RunConfig;
pub use synth::{synth_dataset, SynthData, SynthSpec};

pub const DATA_STREAM: u64 = 1;
pub const INIT_STREAM: u64 = 2;
pub const SHUFFLE_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{path} line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("synthetic spec: {0}")]
    SpecInconsistent(String),
    #[error("vocabulary hash mismatch: {what} expects {expected}, vocabulary is {actual}")]
    ConfigMismatch { what: String, expected: String, actual: String },
    #[error("training loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("row {index}: prediction id {predicted:?} does not match gold id {gold:?}")]
    IdMismatch { index: usize, predicted: String, gold: String },
    #[error("gold label {name:?} at level {level} is not in the taxonomy")]
    UnknownGold { name: String, level: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    /// Validation failures are problems with inputs or configuration, as
    /// opposed to I/O or numerical failures at run time.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            PipelineError::Io { .. } | PipelineError::DivergedLoss { .. } | PipelineError::Model(_)
        )
    }
}

pub fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write(path: &Path, contents: &str) -> Result<(), PipelineError> {
    let io = |e: std::io::Error| PipelineError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLabel {
    pub name: String,
    pub level: usize,
}

/// One corpus JSONL row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub labels: Vec<CorpusLabel>,
}

impl CorpusRecord {
    pub fn gold(&self) -> GoldSet {
        let mut g: GoldSet = BTreeMap::new();
        for l in &self.labels {
            g.entry(l.level).or_default().insert(l.name.clone());
        }
        g
    }
}

/// Non-blank lines that are not `#` comments, with 1-based line numbers.
fn data_lines(source: &str) -> impl Iterator<Item = (usize, &str)> {
    source
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_corpus(source: &str, path: &Path) -> Result<Vec<CorpusRecord>, PipelineError> {
    data_lines(source)
        .map(|(line, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Parse {
                path: path.to_path_buf(),
                line,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>, PipelineError> {
    parse_corpus(&read(path)?, path)
}

pub fn corpus_to_jsonl(records: &[CorpusRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain data") + "\n")
        .collect()
}

pub fn read_taxonomy(path: &Path) -> Result<Taxonomy, PipelineError> {
    Taxonomy::parse_tsv(&read(path)?).map_err(|e| PipelineError::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })
}

/// Splits off the trailing `fraction` of records (at least one when the
/// fraction is positive and there are two or more records).
pub fn split_holdout(mut records: Vec<CorpusRecord>, fraction: f64) -> (Vec<CorpusRecord>, Vec<CorpusRecord>) {
    let mut n = (records.len() as f64 * fraction).round() as usize;
    if fraction > 0.0 && n == 0 && records.len() > 1 {
        n = 1;
    }
    let held = records.split_off(records.len() - n.min(records.len()));
    (records, held)
}

/// Label BPE over taxonomy names, extended with whole-word tokens for
/// document words that occur at least `min_word_freq` times.
pub fn build_vocabulary(
    t: &Taxonomy,
    corpus: &[CorpusRecord],
    bpe_vocab_size: usize,
    min_word_freq: usize,
) -> Result<LabelVocabulary, PipelineError> {
    let names: Vec<&str> = t.labels().iter().map(|l| l.name.as_str()).collect();
    let mut v = train_bpe(&names, bpe_vocab_size).map_err(|e| PipelineError::Invalid(e.to_string()))?;
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for r in corpus {
        for w in r.title.split_whitespace().chain(r.abstract_text.split_whitespace()) {
            *freq.entry(w).or_default() += 1;
        }
    }
    v.extend_with_words(freq.into_iter().filter(|&(_, f)| f >= min_word_freq.max(1)).map(|(w, _)| w));
    Ok(v)
}

pub fn read_vocab(path: &Path) -> Result<LabelVocabulary, PipelineError> {
    LabelVocabulary::parse(&read(path)?).map_err(|e| PipelineError::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })
}

const MASK_HEADER: &str = "#vocab\t";

/// Mask dump preceded by the vocabulary hash.
pub fn masks_to_file_string(masks: &LevelMaskSet, vocab_hash: &str) -> String {
    format!("{MASK_HEADER}{vocab_hash}\n{}", masks.dump())
}

pub fn parse_masks_file(source: &str, path: &Path) -> Result<(LevelMaskSet, String), PipelineError> {
    let parse_err = |reason: String| PipelineError::Parse {
        path: path.to_path_buf(),
        line: 1,
        reason,
    };
    let (first, rest) = source.split_once('\n').unwrap_or((source, ""));
    let hash = first
        .strip_prefix(MASK_HEADER)
        .ok_or_else(|| parse_err("missing vocabulary hash header".into()))?;
    let masks = LevelMaskSet::parse_dump(rest).map_err(|e| parse_err(e.to_string()))?;
    Ok((masks, hash.trim().to_string()))
}

pub fn check_hash(what: &str, expected: &str, v: &LabelVocabulary) -> Result<(), PipelineError> {
    let actual = v.hash();
    if expected != actual {
        return Err(PipelineError::ConfigMismatch {
            what: what.to_string(),
            expected: expected.to_string(),
            actual,
        });
    }
    Ok(())
}

/// Title and abstract encoded with whole-word tokens, truncated to the
/// model's segment limits.
pub fn to_document(r: &CorpusRecord, v: &LabelVocabulary, cfg: &model::ModelConfig) -> Document {
    let mut title = v.encode_words(&r.title);
    let mut abs = v.encode_words(&r.abstract_text);
    title.truncate(cfg.max_title);
    abs.truncate(cfg.max_abstract);
    Document::new(title, abs)
}

fn level_target(names: &[&str], v: &LabelVocabulary, max_target: usize) -> Vec<TokenId> {
    let mut target = vec![BOS];
    for (i, name) in names.iter().enumerate() {
        let ids = v.encode_label(name);
        // inputs are the target without its final EOS
        let needed = target.len() + usize::from(i > 0) + ids.len();
        if needed > max_target {
            log::warn!("level target truncated before {name:?}");
            break;
        }
        if i > 0 {
            target.push(SEP);
        }
        target.extend(ids);
    }
    target.push(EOS);
    target
}

/// Teacher-forced episodes for every taxonomy level: gold labels of the
/// level in name order, with the previous level's gold labels as context.
pub fn training_example(r: &CorpusRecord, t: &Taxonomy, v: &LabelVocabulary, cfg: &model::ModelConfig) -> TrainingExample {
    let gold = r.gold();
    let mut episodes = Vec::with_capacity(t.max_level() + 1);
    let mut previous: Vec<Vec<TokenId>> = Vec::new();
    for k in 0..=t.max_level() {
        let names: Vec<&str> = gold
            .get(&k)
            .into_iter()
            .flatten()
            .filter(|n| t.contains_name(n).is_some_and(|l| l.level == k))
            .map(String::as_str)
            .collect();
        episodes.push(Episode {
            context: previous.clone(),
            target: level_target(&names, v, cfg.max_target),
        });
        previous = names.iter().map(|n| v.encode_label(n)).collect();
    }
    TrainingExample {
        doc: to_document(r, v, cfg),
        episodes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn init_params(cfg: &RunConfig, vocab_size: usize) -> Result<ModelParams, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    Ok(ModelParams::init(cfg.model_config(vocab_size), &mut rng)?)
}

/// Trains from the seeded initialization over `corpus`.
pub fn train(cfg: &RunConfig, t: &Taxonomy, corpus: &[CorpusRecord], v: &LabelVocabulary) -> Result<TrainOutcome, PipelineError> {
    if !cfg.vocab_hash.is_empty() {
        check_hash("config vocab_hash", &cfg.vocab_hash, v)?;
    }
    let mut params = init_params(cfg, v.size())?;
    let examples: Vec<TrainingExample> = corpus
        .iter()
        .map(|r| training_example(r, t, v, &params.config))
        .filter(|ex| !ex.doc.is_empty())
        .collect();
    if examples.len() < corpus.len() {
        log::warn!("{} records without document tokens skipped", corpus.len() - examples.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut opt = MomentumSgd::new(cfg.optimizer(), &params.weights);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if examples.is_empty() {
            return Err(PipelineError::Invalid("no trainable records".into()));
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grad) = match model::gradient(&params, &batch) {
                Ok(x) => x,
                Err(ModelError::NonFiniteActivation(_)) => return Err(PipelineError::DivergedLoss { epoch }),
                Err(e) => return Err(e.into()),
            };
            if !loss.is_finite() || !grad.all_finite() {
                return Err(PipelineError::DivergedLoss { epoch });
            }
            opt.step(&mut params.weights, &grad);
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("epoch {epoch}: loss {mean:.4} gate {:.4}", params.weights.gate);
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    Checkpoint::from_json(&read(path)?).map_err(|e| PipelineError::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })
}

/// Everything needed to tag: model, taxonomy, vocabulary and masks, with
/// their vocabulary hashes checked against each other.
pub struct Artifacts {
    pub params: ModelParams,
    pub taxonomy: Taxonomy,
    pub vocab: LabelVocabulary,
    pub masks: LevelMaskSet,
}

impl Artifacts {
    pub fn new(
        checkpoint: &Checkpoint,
        taxonomy: Taxonomy,
        vocab: LabelVocabulary,
        masks: LevelMaskSet,
        masks_hash: &str,
    ) -> Result<Self, PipelineError> {
        check_hash("checkpoint", &checkpoint.vocab_hash, &vocab)?;
        check_hash("masks", masks_hash, &vocab)?;
        let params = checkpoint.to_params().map_err(|e| PipelineError::Invalid(e.to_string()))?;
        Ok(Self {
            params,
            taxonomy,
            vocab,
            masks,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let checkpoint = read_checkpoint(&cfg.checkpoint)?;
        let vocab = read_vocab(&cfg.vocab)?;
        if !cfg.vocab_hash.is_empty() {
            check_hash("config vocab_hash", &cfg.vocab_hash, &vocab)?;
        }
        let (masks, hash) = parse_masks_file(&read(&cfg.masks)?, &cfg.masks)?;
        let taxonomy = read_taxonomy(&cfg.taxonomy)?;
        Self::new(&checkpoint, taxonomy, vocab, masks, &hash)
    }

    /// Artifacts built in memory, masks derived from the taxonomy.
    pub fn from_parts(params: ModelParams, taxonomy: Taxonomy, vocab: LabelVocabulary) -> Self {
        let (masks, _) = build_level_masks(&taxonomy, &vocab);
        Self {
            params,
            taxonomy,
            vocab,
            masks,
        }
    }

    pub fn tag_record(&self, r: &CorpusRecord, gen: &GenerationConfig) -> PredictionSet {
        let doc = to_document(r, &self.vocab, &self.params.config);
        tag_document(&self.params, &doc, &self.taxonomy, &self.vocab, &self.masks, gen).unwrap_or_else(|e| PredictionSet {
            diagnostics: vec![Diagnostic {
                level: 0,
                kind: "document_failed".into(),
                detail: e.to_string(),
            }],
            ..PredictionSet::default()
        })
    }

    /// Tags every record in parallel; output order follows input order.
    pub fn tag_all(&self, records: &[CorpusRecord], gen: &GenerationConfig) -> Vec<PredictionSet> {
        records.par_iter().map(|r| self.tag_record(r, gen)).collect()
    }
}

/// Predictions JSONL: a header comment, then one row per record.
pub fn predictions_to_jsonl(records: &[CorpusRecord], preds: &[PredictionSet], vocab_hash: &str) -> String {
    let mut out = format!("# predictions vocab={vocab_hash}\n");
    for (r, p) in records.iter().zip(preds) {
        out.push_str(&p.to_json_row(&r.id).to_string());
        out.push('\n');
    }
    out
}

pub fn parse_predictions(source: &str, path: &Path) -> Result<Vec<(String, PredictionSet)>, PipelineError> {
    data_lines(source)
        .map(|(line, l)| {
            let err = |reason: String| PipelineError::Parse {
                path: path.to_path_buf(),
                line,
                reason,
            };
            let value: serde_json::Value = serde_json::from_str(l).map_err(|e| err(e.to_string()))?;
            PredictionSet::from_json_row(&value).map_err(err)
        })
        .collect()
}

/// Scores predictions against the gold labels of the aligned corpus.
pub fn evaluate(preds: &[(String, PredictionSet)], gold: &[CorpusRecord], t: &Taxonomy) -> Result<MetricsReport, PipelineError> {
    if preds.len() != gold.len() {
        return Err(PipelineError::IdMismatch {
            index: preds.len().min(gold.len()),
            predicted: preds.get(gold.len()).map(|p| p.0.clone()).unwrap_or_default(),
            gold: gold.get(preds.len()).map(|g| g.id.clone()).unwrap_or_default(),
        });
    }
    for (i, ((id, _), r)) in preds.iter().zip(gold).enumerate() {
        if *id != r.id {
            return Err(PipelineError::IdMismatch {
                index: i,
                predicted: id.clone(),
                gold: r.id.clone(),
            });
        }
        for l in &r.labels {
            if t.contains_name(&l.name).map(|x| x.level) != Some(l.level) {
                return Err(PipelineError::UnknownGold {
                    name: l.name.clone(),
                    level: l.level,
                });
            }
        }
    }
    let sets: Vec<PredictionSet> = preds.iter().map(|(_, p)| p.clone()).collect();
    let gold: Vec<GoldSet> = gold.iter().map(CorpusRecord::gold).collect();
    evaluate_sets(&sets, &gold, t.max_level() + 1).map_err(|e| PipelineError::Invalid(e.to_string()))
}

/// Distinct discovery candidates across predictions, first occurrence order.
pub fn discovery_texts(preds: &[(String, PredictionSet)]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    preds
        .iter()
        .flat_map(|(_, p)| &p.discovery_candidates)
        .filter(|c| seen.insert(c.text.clone()))
        .map(|c| c.text.clone())
        .collect()
}

/// Placements for new label names; names that cannot be placed are reported
/// with their reason.
pub fn place(names: &[String], a: &Artifacts) -> (Vec<Placement>, Vec<(String, String)>) {
    let mut placed = Vec::new();
    let mut skipped = Vec::new();
    for n in names {
        match propose_placement(n, &a.taxonomy, &a.params, &a.vocab) {
            Ok(p) => placed.push(p),
            Err(e) => skipped.push((n.clone(), e.to_string())),
        }
    }
    (placed, skipped)
}

pub fn placements_to_jsonl(placements: &[Placement]) -> String {
    placements.iter().map(|p| p.to_json_row().to_string() + "\n").collect()
}
