//! Per-level vocabulary masks and the masked softmax.
//!
//! `masks[k][t]` is true when token `t` appears in the encoding of at least one
//! level-`k` label. BOS, EOS and SEP are allowed at every level so the decoder
//! can always delimit and terminate; UNK is never allowed. Masked positions are
//! set to negative infinity before normalization, so their probability is
//! exactly zero.

use std::fmt::Write as _;

use thiserror::Error;

use crate::codec::{LabelVocabulary, TokenId, BOS, EOS, SEP};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("logits length {logits} does not match mask length {mask}")]
    LengthMismatch { logits: usize, mask: usize },
    #[error("mask disallows every token")]
    AllMasked,
    #[error("mask dump line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// A label whose encoding contains UNK tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnkInLabel {
    pub label_id: String,
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelMaskSet {
    masks: Vec<Vec<bool>>,
    vocab_size: usize,
}

/// Mask with only the framing specials allowed.
pub fn specials_only(vocab_size: usize) -> Vec<bool> {
    let mut m = vec![false; vocab_size];
    for s in [BOS, EOS, SEP] {
        m[s as usize] = true;
    }
    m
}

pub fn build_level_masks(t: &Taxonomy, v: &LabelVocabulary) -> (LevelMaskSet, Vec<UnkInLabel>) {
    let size = v.size();
    let mut masks = vec![specials_only(size); t.max_level() + 1];
    let mut warnings = Vec::new();
    for label in t.labels() {
        for id in v.encode_label(&label.name) {
            if id == crate::codec::UNK {
                if warnings.last().map(|w: &UnkInLabel| w.label_id != label.id).unwrap_or(true) {
                    warnings.push(UnkInLabel {
                        label_id: label.id.clone(),
                        level: label.level,
                    });
                }
                continue;
            }
            masks[label.level][id as usize] = true;
        }
    }
    (LevelMaskSet { masks, vocab_size: size }, warnings)
}

impl LevelMaskSet {
    pub fn from_masks(masks: Vec<Vec<bool>>) -> Self {
        let vocab_size = masks.first().map_or(0, Vec::len);
        assert!(masks.iter().all(|m| m.len() == vocab_size), "ragged mask set");
        Self { masks, vocab_size }
    }

    pub fn levels(&self) -> usize {
        self.masks.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn mask(&self, level: usize) -> Option<&[bool]> {
        self.masks.get(level).map(Vec::as_slice)
    }

    pub fn allows(&self, level: usize, token: TokenId) -> bool {
        self.masks
            .get(level)
            .and_then(|m| m.get(token as usize))
            .copied()
            .unwrap_or(false)
    }

    /// One line per level: `level<TAB>runs`, runs written as `T<n>` / `F<n>`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, mask) in self.masks.iter().enumerate() {
            let _ = write!(out, "{k}\t");
            let mut runs = Vec::new();
            let mut i = 0;
            while i < mask.len() {
                let bit = mask[i];
                let start = i;
                while i < mask.len() && mask[i] == bit {
                    i += 1;
                }
                runs.push(format!("{}{}", if bit { 'T' } else { 'F' }, i - start));
            }
            out.push_str(&runs.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse_dump(source: &str) -> Result<Self, MaskError> {
        let mut masks = Vec::new();
        for (i, line) in source.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let err = |reason: &str| MaskError::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (level, runs) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
            if level.parse::<usize>().ok() != Some(i) {
                return Err(err("levels must be listed in order"));
            }
            let mut mask = Vec::new();
            for run in runs.split_whitespace() {
                let (bit, n) = run.split_at(1);
                let n: usize = n.parse().map_err(|_| err("bad run length"))?;
                let bit = match bit {
                    "T" => true,
                    "F" => false,
                    _ => return Err(err("run must start with T or F")),
                };
                mask.extend(std::iter::repeat_n(bit, n));
            }
            masks.push(mask);
        }
        let vocab_size = masks.first().map_or(0, Vec::len);
        if masks.iter().any(|m| m.len() != vocab_size) {
            return Err(MaskError::Parse {
                line: 0,
                reason: "levels have different lengths".into(),
            });
        }
        Ok(Self { masks, vocab_size })
    }
}

fn check(logits: &[f64], mask: &[bool]) -> Result<(), MaskError> {
    if logits.len() != mask.len() {
        return Err(MaskError::LengthMismatch {
            logits: logits.len(),
            mask: mask.len(),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(MaskError::AllMasked);
    }
    Ok(())
}

pub fn masked_logits(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, MaskError> {
    check(logits, mask)?;
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { x } else { f64::NEG_INFINITY })
        .collect())
}

/// Log-probabilities under the mask; disallowed entries are negative infinity.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, MaskError> {
    let z = masked_logits(logits, mask)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(z.into_iter().map(|x| x - log_norm).collect())
}

pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, MaskError> {
    let z = masked_logits(logits, mask)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
