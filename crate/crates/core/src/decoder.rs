//! Level-constrained beam search, per-level generation and the taxonomy filter.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{LabelVocabulary, TokenId, BOS, EOS, SEP, SPECIAL_SURFACES, UNK};
use crate::model::{self, Document, EncodedMemory, ModelError, ModelParams, StepDecoder};
use crate::plc::{masked_log_softmax, LevelMaskSet, MaskError};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("mask does not allow EOS")]
    EosMasked,
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("vocabulary sizes disagree: model {model}, masks {masks}, codec {codec}")]
    VocabMismatch { model: usize, masks: usize, codec: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Level masks applied before every softmax.
    Plc,
    /// Every token except BOS allowed.
    Unconstrained,
    /// Level masks plus the requirement that each label is a child of an
    /// accepted label one level up.
    HardPath,
}

impl std::str::FromStr for Mode {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plc" => Ok(Mode::Plc),
            "unconstrained" => Ok(Mode::Unconstrained),
            "hard_path" => Ok(Mode::HardPath),
            other => Err(DecodeError::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub beam_size: usize,
    /// Longest label, in tokens.
    pub max_label_tokens: usize,
    /// Cap on accepted labels per level, indexed by level.
    pub max_labels_per_level: Vec<usize>,
    /// Inclusive range of levels to generate.
    pub level_range: (usize, usize),
    pub length_penalty: f64,
    pub mode: Mode,
    /// Number of top hypotheses whose labels are collected per level.
    pub num_return: usize,
    /// Decoding steps per level, not counting BOS.
    pub max_steps: usize,
}

impl GenerationConfig {
    pub fn new(max_labels_per_level: Vec<usize>) -> Self {
        let hi = max_labels_per_level.len().saturating_sub(1);
        Self {
            beam_size: 4,
            max_label_tokens: 8,
            max_labels_per_level,
            level_range: (0, hi),
            length_penalty: 1.0,
            mode: Mode::Plc,
            num_return: 1,
            max_steps: 32,
        }
    }

    pub fn validate(&self, max_level: usize) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::InvalidConfig(m));
        let (lo, hi) = self.level_range;
        if lo > hi || hi > max_level {
            return bad(format!("level range ({lo}, {hi}) outside 0..={max_level}"));
        }
        if self.max_labels_per_level.len() <= hi {
            return bad(format!("max_labels_per_level needs an entry for level {hi}"));
        }
        if self.beam_size == 0 || self.max_label_tokens == 0 || self.num_return == 0 || self.max_steps == 0 {
            return bad("beam_size, max_label_tokens, num_return and max_steps must be positive".into());
        }
        if self.length_penalty.is_nan() || self.length_penalty < 0.0 {
            return bad("length_penalty must be non-negative".into());
        }
        Ok(())
    }

    fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam_size,
            max_len: self.max_steps,
            length_penalty: self.length_penalty,
            framing: Some(Framing {
                max_label_tokens: self.max_label_tokens,
            }),
        }
    }
}

/// Rules that keep hypotheses well-formed label lists: BOS only at the start,
/// no empty label, and no label longer than `max_label_tokens`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Framing {
    pub max_label_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Generated tokens per hypothesis, EOS included, BOS excluded.
    pub max_len: usize,
    pub length_penalty: f64,
    pub framing: Option<Framing>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS when finished.
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    pub finished: bool,
    /// Log-probability of every generated token.
    pub token_logprobs: Vec<f64>,
}

impl Hypothesis {
    pub fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn score(&self, length_penalty: f64) -> f64 {
        normalized(self.logprob, self.generated(), length_penalty)
    }
}

fn normalized(logprob: f64, len: usize, length_penalty: f64) -> f64 {
    if len == 0 {
        return logprob;
    }
    logprob / (len as f64).powf(length_penalty)
}

/// Best first: higher score, then shorter, then smaller token ids.
fn rank(a: &Hypothesis, b: &Hypothesis, length_penalty: f64) -> Ordering {
    b.score(length_penalty)
        .total_cmp(&a.score(length_penalty))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn framing_allows(f: &Framing, tokens: &[TokenId], next: TokenId) -> bool {
    let last = *tokens.last().expect("hypotheses start with BOS");
    match next {
        BOS => false,
        SEP => last != BOS && last != SEP,
        EOS => last != SEP,
        _ => {
            let run = tokens.iter().rev().take_while(|&&t| t != BOS && t != SEP).count();
            run < f.max_label_tokens
        }
    }
}

/// Beam search over `step`, normalizing every distribution under `mask`.
///
/// Each step expands every live hypothesis by every allowed token and keeps
/// the `beam_size` best extensions; extensions ending in EOS leave the beam.
/// With `beam_size == 1` this is greedy decoding. Returns at most
/// `beam_size` finished hypotheses, best first. When nothing finishes within
/// `max_len` steps the best unfinished hypothesis is returned, flagged.
pub fn beam_search<F>(mut step: F, mask: &[bool], cfg: &BeamConfig) -> Result<Vec<Hypothesis>, DecodeError>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>, DecodeError>,
{
    if !mask.get(EOS as usize).copied().unwrap_or(false) {
        return Err(DecodeError::EosMasked);
    }
    if cfg.beam_size == 0 || cfg.max_len == 0 {
        return Err(DecodeError::InvalidConfig("beam_size and max_len must be positive".into()));
    }
    let alpha = cfg.length_penalty;
    let mut alive = vec![Hypothesis {
        tokens: vec![BOS],
        logprob: 0.0,
        finished: false,
        token_logprobs: Vec::new(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut candidates = Vec::new();
        for h in &alive {
            let logits = step(&h.tokens)?;
            let lp = masked_log_softmax(&logits, mask)?;
            for (t, &l) in lp.iter().enumerate() {
                let t = t as TokenId;
                if !mask[t as usize] || l == f64::NEG_INFINITY {
                    continue;
                }
                if let Some(f) = &cfg.framing {
                    if !framing_allows(f, &h.tokens, t) {
                        continue;
                    }
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                let mut token_logprobs = h.token_logprobs.clone();
                token_logprobs.push(l);
                candidates.push(Hypothesis {
                    tokens,
                    logprob: h.logprob + l,
                    finished: t == EOS,
                    token_logprobs,
                });
            }
        }
        // every candidate has the same length, so raw log-probability ranks them
        candidates.sort_by(|a, b| rank(a, b, 0.0));
        candidates.truncate(cfg.beam_size);
        let (done, live): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|h| h.finished);
        finished.extend(done);
        alive = live;
        if alive.is_empty() {
            break;
        }
        if finished.len() >= cfg.beam_size {
            finished.sort_by(|a, b| rank(a, b, alpha));
            let worst = finished[cfg.beam_size - 1].score(alpha);
            // no continuation can beat its own log-probability spread over the maximum length
            let bound = alive
                .iter()
                .map(|h| normalized(h.logprob, cfg.max_len, alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if bound < worst {
                break;
            }
        }
    }

    if finished.is_empty() {
        alive.sort_by(|a, b| rank(a, b, alpha));
        return Ok(alive.into_iter().take(1).collect());
    }
    finished.sort_by(|a, b| rank(a, b, alpha));
    finished.truncate(cfg.beam_size);
    Ok(finished)
}

/// A generated label string with its score.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub text: String,
    pub score: f64,
}

/// Output of one level's decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutput {
    pub labels: Vec<Generated>,
    pub hypotheses: Vec<Hypothesis>,
}

/// Splits a hypothesis on SEP and scores each label by its length-normalized
/// token log-probability.
fn segments(h: &Hypothesis, length_penalty: f64) -> Vec<(Vec<TokenId>, f64)> {
    let mut out = Vec::new();
    let mut cur: Vec<TokenId> = Vec::new();
    let mut sum = 0.0;
    for (&t, &l) in h.tokens[1..].iter().zip(&h.token_logprobs) {
        if t == SEP || t == EOS {
            if !cur.is_empty() {
                let n = cur.len();
                out.push((std::mem::take(&mut cur), normalized(sum, n, length_penalty)));
            }
            sum = 0.0;
        } else {
            cur.push(t);
            sum += l;
        }
    }
    if !cur.is_empty() {
        let n = cur.len();
        out.push((cur, normalized(sum, n, length_penalty)));
    }
    out
}

/// Mask used at a level under a given mode.
pub fn level_mask(masks: &LevelMaskSet, level: usize, mode: Mode) -> Option<Vec<bool>> {
    match mode {
        Mode::Unconstrained => {
            let mut m = vec![true; masks.vocab_size()];
            if let Some(b) = m.get_mut(BOS as usize) {
                *b = false;
            }
            Some(m)
        }
        Mode::Plc | Mode::HardPath => masks.mask(level).map(<[bool]>::to_vec),
    }
}

/// Decodes one level of a document and splits the best hypotheses into
/// label strings. Duplicates are kept; at most `max_labels_per_level[level]`
/// labels are returned, best first.
pub fn generate_level(
    p: &ModelParams,
    m: &EncodedMemory,
    level: usize,
    masks: &LevelMaskSet,
    v: &LabelVocabulary,
    cfg: &GenerationConfig,
) -> Result<LevelOutput, DecodeError> {
    let mask = level_mask(masks, level, cfg.mode)
        .ok_or_else(|| DecodeError::InvalidConfig(format!("no mask for level {level}")))?;
    let decoder = StepDecoder::new(p, m);
    generate_from(|prefix| Ok(decoder.step(prefix)?), level, &mask, v, cfg)
}

/// [`generate_level`] over an arbitrary next-token scorer.
pub fn generate_from<F>(
    step: F,
    level: usize,
    mask: &[bool],
    v: &LabelVocabulary,
    cfg: &GenerationConfig,
) -> Result<LevelOutput, DecodeError>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>, DecodeError>,
{
    let cap = cfg.max_labels_per_level.get(level).copied().unwrap_or(0);
    let hyps = beam_search(step, mask, &cfg.beam())?;
    let mut labels = Vec::new();
    for h in hyps.iter().take(cfg.num_return) {
        for (ids, score) in segments(h, cfg.length_penalty) {
            let text = v
                .decode_tokens(&ids)
                .map_err(|e| DecodeError::InvalidConfig(e.to_string()))?;
            labels.push(Generated { text, score });
        }
    }
    labels.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.text.cmp(&b.text)));
    labels.truncate(cap);
    Ok(LevelOutput { labels, hypotheses: hyps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryCandidate {
    pub text: String,
    pub level: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub level: usize,
    pub kind: String,
    pub detail: String,
}

impl Diagnostic {
    fn new(level: usize, kind: &str, detail: impl Into<String>) -> Self {
        Self {
            level,
            kind: kind.to_string(),
            detail: detail.into(),
        }
    }
}

/// Result of the taxonomy filter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Filtered {
    /// `(name, level, score)`, best first within each level.
    pub valid: Vec<(String, usize, f64)>,
    pub discovery: Vec<DiscoveryCandidate>,
    pub diagnostics: Vec<Diagnostic>,
}

fn contains_unk(text: &str) -> bool {
    text.contains(SPECIAL_SURFACES[UNK as usize])
}

/// Collapses duplicates (keeping the best score), keeps strings that name a
/// taxonomy label at the generated level, routes unknown strings to
/// discovery and drops strings that name a label at another level.
pub fn filter_predictions(raw: &[(String, usize, f64)], t: &Taxonomy) -> Filtered {
    let mut best: BTreeMap<(usize, &str), f64> = BTreeMap::new();
    let mut out = Filtered::default();
    for (text, level, score) in raw {
        if contains_unk(text) {
            out.diagnostics.push(Diagnostic::new(*level, "unk", text.clone()));
            continue;
        }
        best.entry((*level, text.as_str()))
            .and_modify(|s| *s = s.max(*score))
            .or_insert(*score);
    }
    for ((level, text), score) in best {
        match t.contains_name(text) {
            Some(label) if label.level == level => out.valid.push((text.to_string(), level, score)),
            Some(label) => out.diagnostics.push(Diagnostic::new(
                level,
                "level_mismatch",
                format!("{text} is a level {} label", label.level),
            )),
            None => out.discovery.push(DiscoveryCandidate {
                text: text.to_string(),
                level,
                score,
            }),
        }
    }
    let by_score = |a: &(String, usize, f64), b: &(String, usize, f64)| {
        a.1.cmp(&b.1).then(b.2.total_cmp(&a.2)).then_with(|| a.0.cmp(&b.0))
    };
    out.valid.sort_by(by_score);
    out.discovery
        .sort_by(|a, b| a.level.cmp(&b.level).then(b.score.total_cmp(&a.score)).then_with(|| a.text.cmp(&b.text)));
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub per_level: BTreeMap<usize, Vec<ScoredLabel>>,
    pub discovery_candidates: Vec<DiscoveryCandidate>,
    pub diagnostics: Vec<Diagnostic>,
    /// Token sequences of every returned hypothesis, by level, before filtering.
    #[serde(skip)]
    pub raw_tokens: BTreeMap<usize, Vec<Vec<TokenId>>>,
}

impl PredictionSet {
    pub fn labels_at(&self, level: usize) -> impl Iterator<Item = &str> {
        self.per_level.get(&level).into_iter().flatten().map(|s| s.label.as_str())
    }

    /// One predictions JSONL row.
    pub fn to_json_row(&self, id: &str) -> serde_json::Value {
        let levels: serde_json::Map<String, serde_json::Value> = self
            .per_level
            .iter()
            .map(|(k, v)| (k.to_string(), serde_json::to_value(v).expect("plain data")))
            .collect();
        serde_json::json!({
            "id": id,
            "levels": levels,
            "discovery": self.discovery_candidates,
            "diagnostics": self.diagnostics,
        })
    }

    pub fn from_json_row(row: &serde_json::Value) -> Result<(String, Self), String> {
        #[derive(Deserialize)]
        struct Row {
            id: String,
            levels: BTreeMap<String, Vec<ScoredLabel>>,
            #[serde(default)]
            discovery: Vec<DiscoveryCandidate>,
            #[serde(default)]
            diagnostics: Vec<Diagnostic>,
        }
        let r: Row = serde_json::from_value(row.clone()).map_err(|e| e.to_string())?;
        let mut per_level = BTreeMap::new();
        for (k, v) in r.levels {
            let k: usize = k.parse().map_err(|_| format!("bad level key {k:?}"))?;
            per_level.insert(k, v);
        }
        Ok((
            r.id,
            Self {
                per_level,
                discovery_candidates: r.discovery,
                diagnostics: r.diagnostics,
                raw_tokens: BTreeMap::new(),
            },
        ))
    }
}

/// Tags one document level by level.
///
/// The document is encoded once. For each level in range, labels accepted one
/// level up are fused into memory, the level is decoded under its mask and
/// the output filtered against the taxonomy. A failure at one level leaves
/// that level empty and records a diagnostic.
pub fn tag_document(
    p: &ModelParams,
    doc: &Document,
    t: &Taxonomy,
    v: &LabelVocabulary,
    masks: &LevelMaskSet,
    cfg: &GenerationConfig,
) -> Result<PredictionSet, DecodeError> {
    if p.config.vocab_size != masks.vocab_size() || v.size() != masks.vocab_size() {
        return Err(DecodeError::VocabMismatch {
            model: p.config.vocab_size,
            masks: masks.vocab_size(),
            codec: v.size(),
        });
    }
    cfg.validate(t.max_level())?;
    let memory = model::encode_document(p, doc)?;
    tag_levels(t, masks, cfg, |level, previous, mask| {
        let context: Vec<Vec<TokenId>> = previous.iter().map(|n| v.encode_label(n)).collect();
        let fused = model::fuse_context(p, &memory, &context);
        let decoder = StepDecoder::new(p, &fused);
        generate_from(|prefix| Ok(decoder.step(prefix)?), level, mask, v, cfg)
    })
}

/// The level loop of [`tag_document`] over any per-level generator. The
/// generator receives the level, the labels accepted one level up and the
/// mask for the configured mode.
pub fn tag_levels<G>(t: &Taxonomy, masks: &LevelMaskSet, cfg: &GenerationConfig, mut generate: G) -> Result<PredictionSet, DecodeError>
where
    G: FnMut(usize, &[String], &[bool]) -> Result<LevelOutput, DecodeError>,
{
    cfg.validate(t.max_level())?;
    let (lo, hi) = cfg.level_range;
    let mut out = PredictionSet::default();
    let mut previous: Vec<String> = Vec::new();
    for level in lo..=hi {
        let attempt = level_mask(masks, level, cfg.mode)
            .ok_or_else(|| DecodeError::InvalidConfig(format!("no mask for level {level}")))
            .and_then(|mask| generate(level, &previous, &mask));
        let accepted = match attempt {
            Ok(generated) => {
                out.raw_tokens
                    .insert(level, generated.hypotheses.iter().map(|h| h.tokens.clone()).collect());
                let raw: Vec<(String, usize, f64)> =
                    generated.labels.into_iter().map(|g| (g.text, level, g.score)).collect();
                let filtered = filter_predictions(&raw, t);
                out.discovery_candidates.extend(filtered.discovery);
                out.diagnostics.extend(filtered.diagnostics);
                filtered
                    .valid
                    .into_iter()
                    .map(|(label, _, score)| ScoredLabel { label, score })
                    .collect()
            }
            Err(e) => {
                out.diagnostics.push(Diagnostic::new(level, "level_failed", e.to_string()));
                Vec::new()
            }
        };
        let mut accepted = if cfg.mode == Mode::HardPath && level > 0 {
            restrict_to_children(accepted, &previous, level, t, &mut out.diagnostics)
        } else {
            accepted
        };
        accepted.truncate(cfg.max_labels_per_level[level]);
        previous = accepted.iter().map(|s| s.label.clone()).collect();
        out.per_level.insert(level, accepted);
    }
    Ok(out)
}

fn restrict_to_children(
    accepted: Vec<ScoredLabel>,
    parents: &[String],
    level: usize,
    t: &Taxonomy,
    diagnostics: &mut Vec<Diagnostic>,
) -> Vec<ScoredLabel> {
    let allowed: HashSet<&str> = parents
        .iter()
        .filter_map(|n| t.contains_name(n))
        .flat_map(|l| t.children_of(&l.id).unwrap_or_default())
        .map(|c| c.name.as_str())
        .collect();
    accepted
        .into_iter()
        .filter(|s| {
            let keep = allowed.contains(s.label.as_str());
            if !keep {
                diagnostics.push(Diagnostic::new(level, "not_a_child", s.label.clone()));
            }
            keep
        })
        .collect()
}

/// Hard path-following comparator: identical to [`tag_document`] with the
/// mode forced to [`Mode::HardPath`].
pub fn hard_path_mode(
    p: &ModelParams,
    doc: &Document,
    t: &Taxonomy,
    v: &LabelVocabulary,
    masks: &LevelMaskSet,
    cfg: &GenerationConfig,
) -> Result<PredictionSet, DecodeError> {
    let cfg = GenerationConfig {
        mode: Mode::HardPath,
        ..cfg.clone()
    };
    tag_document(p, doc, t, v, masks, &cfg)
}
