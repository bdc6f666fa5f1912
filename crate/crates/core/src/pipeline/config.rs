//! Flat run configuration read from a TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::SynthSpec;
use super::PipelineError;
use crate::decoder::{GenerationConfig, Mode};
use crate::model::optim::OptimizerConfig;
use crate::model::ModelConfig;

/// Every key is top level. Relative paths resolve against the directory of
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub taxonomy: PathBuf,
    pub corpus: PathBuf,
    pub eval_corpus: PathBuf,
    pub vocab: PathBuf,
    pub masks: PathBuf,
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
    pub metrics: PathBuf,
    pub placements: PathBuf,

    pub seed: u64,

    pub synth_levels: usize,
    pub synth_labels_per_level: Vec<usize>,
    pub synth_docs: usize,
    pub synth_vocab_words: usize,
    pub synth_signal_words: usize,
    pub synth_noise_ratio: f64,
    /// Trailing fraction of the synthetic corpus written to `eval_corpus`.
    pub holdout_fraction: f64,

    pub bpe_vocab_size: usize,
    /// Document words seen fewer times than this map to UNK.
    pub min_word_freq: usize,
    /// When set, the vocabulary file must hash to this value.
    pub vocab_hash: String,

    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_title: usize,
    pub max_abstract: usize,
    pub max_target: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,

    pub beam_size: usize,
    pub max_label_tokens: usize,
    pub max_labels_per_level: Vec<usize>,
    pub level_lo: usize,
    /// Highest level to generate; negative means the taxonomy's deepest level.
    pub level_hi: i64,
    pub length_penalty: f64,
    pub mode: String,
    pub num_return: usize,
    pub max_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk(0);
        let opt = OptimizerConfig::default();
        Self {
            taxonomy: "taxonomy.tsv".into(),
            corpus: "corpus.jsonl".into(),
            eval_corpus: "eval.jsonl".into(),
            vocab: "vocab.txt".into(),
            masks: "masks.txt".into(),
            checkpoint: "model.json".into(),
            predictions: "predictions.jsonl".into(),
            metrics: "metrics.json".into(),
            placements: "placements.jsonl".into(),
            seed: 7,
            synth_levels: 3,
            synth_labels_per_level: vec![2, 4, 8],
            synth_docs: 5000,
            synth_vocab_words: 200,
            synth_signal_words: 2,
            synth_noise_ratio: 0.2,
            holdout_fraction: 0.1,
            bpe_vocab_size: 256,
            min_word_freq: 1,
            vocab_hash: String::new(),
            d_model: model.d_model,
            heads: model.heads,
            d_ff: model.d_ff,
            encoder_layers: model.encoder_layers,
            decoder_layers: model.decoder_layers,
            max_title: model.max_title,
            max_abstract: model.max_abstract,
            max_target: model.max_target,
            epochs: 10,
            batch_size: 16,
            learning_rate: opt.learning_rate,
            momentum: opt.momentum,
            warmup_steps: opt.warmup_steps,
            clip_norm: opt.clip_norm,
            beam_size: 4,
            max_label_tokens: 8,
            max_labels_per_level: vec![4; 6],
            level_lo: 0,
            level_hi: -1,
            length_penalty: 1.0,
            mode: "plc".into(),
            num_return: 1,
            max_steps: 32,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Parses TOML text and applies `key=value` overrides. Override values
    /// are read as TOML, falling back to a bare string.
    pub fn from_toml(source: &str, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut table: toml::Table = source.parse().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override {o:?} is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (or defaults when `path` is `None`) and resolves
    /// relative paths against its directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, PipelineError> {
        let (source, base) = match path {
            Some(p) => (super::read(p)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
            None => (String::new(), PathBuf::new()),
        };
        let mut cfg = Self::from_toml(&source, overrides)?;
        cfg.resolve(&base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.taxonomy,
            &mut self.corpus,
            &mut self.eval_corpus,
            &mut self.vocab,
            &mut self.masks,
            &mut self.checkpoint,
            &mut self.predictions,
            &mut self.metrics,
            &mut self.placements,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.mode.parse::<Mode>().is_err() {
            return bad("mode must be plc, unconstrained or hard_path");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be positive and momentum in [0, 1)");
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            levels: self.synth_levels,
            labels_per_level: self.synth_labels_per_level.clone(),
            vocab_words: self.synth_vocab_words,
            docs: self.synth_docs,
            signal_words_per_label: self.synth_signal_words,
            noise_ratio: self.synth_noise_ratio,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            max_title: self.max_title,
            max_abstract: self.max_abstract,
            max_target: self.max_target,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            warmup_steps: self.warmup_steps,
            clip_norm: self.clip_norm,
        }
    }

    /// Generation settings for a taxonomy whose deepest level is `max_level`.
    pub fn generation(&self, max_level: usize) -> Result<GenerationConfig, PipelineError> {
        let hi = if self.level_hi < 0 { max_level } else { self.level_hi as usize };
        let cfg = GenerationConfig {
            beam_size: self.beam_size,
            max_label_tokens: self.max_label_tokens,
            max_labels_per_level: self.max_labels_per_level.clone(),
            level_range: (self.level_lo, hi),
            length_penalty: self.length_penalty,
            mode: self.mode.parse().map_err(|e: crate::decoder::DecodeError| PipelineError::Config(e.to_string()))?,
            num_return: self.num_return,
            max_steps: self.max_steps,
        };
        cfg.validate(max_level).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_source_gives_defaults() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = RunConfig::from_toml(
            "epochs = 3\nmode = \"plc\"\n",
            &["epochs=5".into(), "mode=hard_path".into(), "max_labels_per_level=[1,2,4]".into()],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.mode, "hard_path");
        assert_eq!(cfg.max_labels_per_level, vec![1, 2, 4]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::from_toml("nope = 1", &[]), Err(PipelineError::Config(_))));
        assert!(matches!(RunConfig::from_toml("mode = \"fast\"", &[]), Err(PipelineError::Config(_))));
        assert!(matches!(RunConfig::from_toml("", &["epochs".into()]), Err(PipelineError::Config(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "vocab = \"v.txt\"\ncheckpoint = \"/abs/model.json\"\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.vocab, dir.path().join("v.txt"));
        assert_eq!(cfg.checkpoint, PathBuf::from("/abs/model.json"));
    }

    #[test]
    fn generation_range_defaults_to_deepest_level() {
        let g = RunConfig::default().generation(2).unwrap();
        assert_eq!(g.level_range, (0, 2));
        let cfg = RunConfig {
            max_labels_per_level: vec![1],
            ..RunConfig::default()
        };
        assert!(cfg.generation(2).is_err());
    }
}
