//! Deterministic synthetic taxonomy and corpus.
//!
//! Level-0 labels are single invented words; a level-1 label extends its
//! parent's name with a fresh word; deeper labels extend their parent with a
//! suffix drawn from a small pool shared across the level. Every label owns
//! its own signal words. A document picks one or two deepest-level labels,
//! closes the set under ancestors, and writes all signal words of every gold
//! label plus noise words, shuffled and split into title and abstract.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusLabel, CorpusRecord, PipelineError, DATA_STREAM};
use crate::taxonomy::{Label, LabelRow, Taxonomy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub levels: usize,
    pub labels_per_level: Vec<usize>,
    /// Size of the noise word pool.
    pub vocab_words: usize,
    pub docs: usize,
    pub signal_words_per_label: usize,
    pub noise_ratio: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::SpecInconsistent(m.to_string()));
        if self.levels == 0 || self.docs == 0 {
            return bad("levels and docs must be at least 1");
        }
        if self.labels_per_level.len() != self.levels {
            return bad("labels_per_level needs one entry per level");
        }
        if self.labels_per_level.contains(&0) {
            return bad("every level needs at least one label");
        }
        if self.labels_per_level.windows(2).any(|w| w[1] < w[0]) {
            return bad("labels_per_level must not shrink, or some labels would be childless");
        }
        if self.signal_words_per_label == 0 {
            return bad("signal_words_per_label must be at least 1");
        }
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return bad("noise_ratio must lie in [0, 1)");
        }
        if self.noise_ratio > 0.0 && self.vocab_words == 0 {
            return bad("noise needs a non-empty word pool");
        }
        Ok(())
    }
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

struct WordMaker {
    used: BTreeSet<String>,
}

impl WordMaker {
    fn fresh(&mut self, rng: &mut ChaCha8Rng, syllables: usize) -> String {
        loop {
            let w: String = (0..syllables)
                .map(|_| format!("{}{}", ONSETS.choose(rng).expect("non-empty"), VOWELS.choose(rng).expect("non-empty")))
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

/// Synthetic taxonomy plus corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub taxonomy: Taxonomy,
    pub corpus: Vec<CorpusRecord>,
    /// Signal words of every label, keyed by label name.
    pub signal_words: BTreeMap<String, Vec<String>>,
    pub noise_words: Vec<String>,
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthData, PipelineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(DATA_STREAM);
    let mut words = WordMaker { used: BTreeSet::new() };

    // labels: (id, name, level, parent index in previous level)
    let mut levels: Vec<Vec<(Label, Option<usize>)>> = Vec::new();
    for (k, &n) in spec.labels_per_level.iter().enumerate() {
        let mut level = Vec::with_capacity(n);
        let siblings = if k == 0 { 1 } else { n.div_ceil(spec.labels_per_level[k - 1]) };
        let suffixes: Vec<String> = (0..siblings).map(|_| words.fresh(&mut rng, 2)).collect();
        for i in 0..n {
            let id = format!("L{k}-{i}");
            let (name, parent) = match k {
                0 => (words.fresh(&mut rng, 2), None),
                _ => {
                    let parent = i % spec.labels_per_level[k - 1];
                    let stem = &levels[k - 1][parent].0.name;
                    let word = if k == 1 {
                        words.fresh(&mut rng, 2)
                    } else {
                        suffixes[i / spec.labels_per_level[k - 1]].clone()
                    };
                    (format!("{stem} {word}"), Some(parent))
                }
            };
            level.push((Label::new(id, name, k), parent));
        }
        levels.push(level);
    }
    let rows: Vec<LabelRow> = levels
        .iter()
        .enumerate()
        .flat_map(|(k, level)| {
            let prev = if k == 0 { None } else { Some(&levels[k - 1]) };
            level.iter().map(move |(label, parent)| LabelRow {
                label: label.clone(),
                parents: parent.map(|p| vec![prev.expect("level > 0")[p].0.id.clone()]).unwrap_or_default(),
            })
        })
        .collect();
    let taxonomy = Taxonomy::from_rows(rows).map_err(|e| PipelineError::SpecInconsistent(e.to_string()))?;

    let signal: Vec<Vec<Vec<String>>> = levels
        .iter()
        .map(|level| {
            level
                .iter()
                .map(|_| (0..spec.signal_words_per_label).map(|_| words.fresh(&mut rng, 3)).collect())
                .collect()
        })
        .collect();
    let noise: Vec<String> = (0..spec.vocab_words).map(|_| words.fresh(&mut rng, 3)).collect();

    let deepest = spec.levels - 1;
    let mut corpus = Vec::with_capacity(spec.docs);
    for d in 0..spec.docs {
        let picks = rng.random_range(1..=2usize.min(spec.labels_per_level[deepest]));
        let mut leaves: Vec<usize> = (0..spec.labels_per_level[deepest]).collect();
        leaves.shuffle(&mut rng);
        leaves.truncate(picks);
        let mut gold: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); spec.levels];
        for leaf in leaves {
            let mut i = leaf;
            for k in (0..spec.levels).rev() {
                gold[k].insert(i);
                if let Some(p) = levels[k][i].1 {
                    i = p;
                }
            }
        }
        let mut tokens: Vec<&str> = Vec::new();
        for (k, ids) in gold.iter().enumerate() {
            for &i in ids {
                tokens.extend(signal[k][i].iter().map(String::as_str));
            }
        }
        let n_noise = (tokens.len() as f64 * spec.noise_ratio / (1.0 - spec.noise_ratio)).round() as usize;
        for _ in 0..n_noise {
            tokens.push(noise.choose(&mut rng).expect("validated non-empty"));
        }
        tokens.shuffle(&mut rng);
        let split = tokens.len().div_ceil(3);
        let levels = &levels;
        let mut labels: Vec<CorpusLabel> = gold
            .iter()
            .enumerate()
            .flat_map(|(k, ids)| {
                ids.iter().map(move |&i| CorpusLabel {
                    name: levels[k][i].0.name.clone(),
                    level: k,
                })
            })
            .collect();
        labels.sort_by(|a, b| a.level.cmp(&b.level).then_with(|| a.name.cmp(&b.name)));
        corpus.push(CorpusRecord {
            id: format!("doc-{d:05}"),
            title: tokens[..split].join(" "),
            abstract_text: tokens[split..].join(" "),
            labels,
        });
    }
    let signal_words = levels
        .iter()
        .zip(signal)
        .flat_map(|(level, words)| level.iter().map(|(l, _)| l.name.clone()).zip(words))
        .collect();
    Ok(SynthData {
        taxonomy,
        corpus,
        signal_words,
        noise_words: noise,
    })
}
