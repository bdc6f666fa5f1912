//! Placement of generated labels that are not in the taxonomy.
//!
//! A label is embedded as the unit-normalized mean of its tokens' shared
//! embedding rows. The new label's parent is the most similar existing
//! label; its level is decided by comparing the mean similarity to the
//! parent's parents with the mean similarity to the parent's children.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{LabelVocabulary, TokenId, UNK};
use crate::model::{mean_embedding, ModelParams};
use crate::taxonomy::{Label, Taxonomy};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiscoveryError {
    #[error("label name is empty")]
    EmptyName,
    #[error("every token of {0:?} is unknown")]
    AllUnkLabel(String),
    #[error("{0:?} is already in the taxonomy")]
    AlreadyExists(String),
    #[error("no taxonomy label has a usable embedding")]
    NoCandidates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub new_label: String,
    pub parent_id: String,
    pub assigned_level: usize,
    pub parent_similarity: f64,
    pub upper_similarity: f64,
    pub lower_similarity: f64,
}

impl Placement {
    /// One placements JSONL row.
    pub fn to_json_row(&self) -> serde_json::Value {
        serde_json::json!({
            "text": self.new_label,
            "parent_id": self.parent_id,
            "level": self.assigned_level,
            "sims": {
                "parent": self.parent_similarity,
                "upper": self.upper_similarity,
                "lower": self.lower_similarity,
            },
        })
    }
}

/// Unit-normalized mean embedding of a label's known tokens.
pub fn label_embedding(p: &ModelParams, name: &str, v: &LabelVocabulary) -> Result<Array1<f64>, DiscoveryError> {
    if name.trim().is_empty() {
        return Err(DiscoveryError::EmptyName);
    }
    let ids: Vec<TokenId> = v
        .encode_label(name)
        .into_iter()
        .filter(|&t| t != UNK && (t as usize) < p.config.vocab_size)
        .collect();
    mean_embedding(p, &ids).ok_or_else(|| DiscoveryError::AllUnkLabel(name.to_string()))
}

fn mean_similarity(target: &Array1<f64>, labels: &[&Label], embed: &dyn Fn(&str) -> Option<Array1<f64>>) -> f64 {
    let sims: Vec<f64> = labels.iter().filter_map(|l| embed(&l.name)).map(|e| e.dot(target)).collect();
    if sims.is_empty() {
        -1.0
    } else {
        sims.iter().sum::<f64>() / sims.len() as f64
    }
}

/// Proposes a parent and level for a label that is not in the taxonomy.
///
/// Ties on parent similarity go to the lower level, then the smaller id.
/// The level is one below the parent when the children are at least as
/// similar as the parent's parents; a label with neither counts both as -1.
pub fn propose_placement(new_label: &str, t: &Taxonomy, p: &ModelParams, v: &LabelVocabulary) -> Result<Placement, DiscoveryError> {
    if t.contains_name(new_label).is_some() {
        return Err(DiscoveryError::AlreadyExists(new_label.to_string()));
    }
    let target = label_embedding(p, new_label, v)?;
    let embed = |name: &str| label_embedding(p, name, v).ok();
    let mut best: Option<(&Label, f64)> = None;
    for label in t.labels() {
        let Some(e) = embed(&label.name) else { continue };
        let sim = e.dot(&target);
        let better = match best {
            None => true,
            Some((b, s)) => sim > s || (sim == s && (label.level, &label.id) < (b.level, &b.id)),
        };
        if better {
            best = Some((label, sim));
        }
    }
    let (parent, parent_similarity) = best.ok_or(DiscoveryError::NoCandidates)?;
    let upper = mean_similarity(&target, &t.parents_of(&parent.id).unwrap_or_default(), &embed);
    let lower = mean_similarity(&target, &t.children_of(&parent.id).unwrap_or_default(), &embed);
    let assigned_level = if lower >= upper { parent.level + 1 } else { parent.level };
    Ok(Placement {
        new_label: new_label.to_string(),
        parent_id: parent.id.clone(),
        assigned_level,
        parent_similarity,
        upper_similarity: upper,
        lower_similarity: lower,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::train_bpe;
    use crate::model::ModelConfig;
    use crate::taxonomy::LabelRow;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(id: &str, level: usize, parents: &[&str]) -> LabelRow {
        LabelRow {
            label: Label::new(id, id, level),
            parents: parents.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Vocabulary with one token per word, and params whose embedding rows
    /// are set by hand.
    fn fixture(words: &[&str], rows: &[&[f64]]) -> (LabelVocabulary, ModelParams) {
        let twice: Vec<&str> = words.iter().chain(words).copied().collect();
        let v = train_bpe(&twice, 1000).unwrap();
        for w in words {
            assert_eq!(v.encode_label(w).len(), 1, "{w} should be one token");
        }
        let d = rows[0].len();
        let cfg = ModelConfig {
            vocab_size: v.size(),
            d_model: d,
            heads: 1,
            d_ff: 2,
            encoder_layers: 0,
            decoder_layers: 0,
            max_title: 2,
            max_abstract: 2,
            max_target: 2,
        };
        let mut p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut e = Array2::zeros((v.size(), d));
        for (w, r) in words.iter().zip(rows) {
            let id = v.encode_label(w)[0] as usize;
            e.row_mut(id).assign(&Array1::from(r.to_vec()));
        }
        p.weights.embedding = e;
        (v, p)
    }

    #[test]
    fn single_token_embedding_is_normalized_row() {
        let (v, p) = fixture(&["a", "b"], &[&[3.0, 4.0], &[0.0, 1.0]]);
        let e = label_embedding(&p, "a", &v).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_token_embedding_is_hand_mean() {
        let (v, p) = fixture(&["x", "y"], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let e = label_embedding(&p, "x y", &v).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((e[0] - h).abs() < 1e-15 && (e[1] - h).abs() < 1e-15);
    }

    #[test]
    fn unknown_and_empty_names_fail() {
        let (v, p) = fixture(&["a"], &[&[1.0, 0.0]]);
        assert_eq!(label_embedding(&p, "qqq", &v), Err(DiscoveryError::AllUnkLabel("qqq".into())));
        assert_eq!(label_embedding(&p, " ", &v), Err(DiscoveryError::EmptyName));
        // unknown tokens are skipped when others are known
        assert_eq!(label_embedding(&p, "a qqq", &v).unwrap(), label_embedding(&p, "a", &v).unwrap());
    }

    fn four_label() -> Taxonomy {
        Taxonomy::from_rows(vec![
            row("cs", 0, &[]),
            row("nlp", 1, &["cs"]),
            row("parsing", 2, &["nlp"]),
            row("tagging", 2, &["nlp"]),
        ])
        .unwrap()
    }

    #[test]
    fn placement_below_nearest_label() {
        let words = ["cs", "nlp", "parsing", "tagging", "chunking"];
        let rows: [&[f64]; 5] = [
            &[1.0, 0.0, 0.0],
            &[0.6, 0.8, 0.0],
            &[0.0, 0.8, 0.6],
            &[0.0, 0.6, 0.8],
            &[0.1, 0.9, 0.4],
        ];
        let (v, p) = fixture(&words, &rows);
        let t = four_label();
        let pl = propose_placement("chunking", &t, &p, &v).unwrap();
        // hand cosine table: nlp 0.78, parsing 0.96, tagging 0.86, cs 0.10
        let n = (0.01f64 + 0.81 + 0.16).sqrt();
        assert_eq!(pl.parent_id, "parsing");
        assert!((pl.parent_similarity - (0.72 + 0.24) / n).abs() < 1e-12);

        let rows: [&[f64]; 5] = [
            &[1.0, 0.0, 0.0],
            &[0.6, 0.8, 0.0],
            &[0.0, 0.28, 0.96],
            &[0.0, 0.6, 0.8],
            &[0.3, 0.9, 0.3],
        ];
        let (v, p) = fixture(&words, &rows);
        let pl = propose_placement("chunking", &t, &p, &v).unwrap();
        let n = (0.09f64 + 0.81 + 0.09).sqrt();
        assert_eq!(pl.parent_id, "nlp");
        assert!((pl.parent_similarity - (0.18 + 0.72) / n).abs() < 1e-12);
        assert!((pl.upper_similarity - 0.3 / n).abs() < 1e-12);
        let lower = ((0.252 + 0.288) / n + (0.54 + 0.24) / n) / 2.0;
        assert!((pl.lower_similarity - lower).abs() < 1e-12);
        assert_eq!(pl.assigned_level, 2);
    }

    #[test]
    fn isolated_root_prefers_child_level() {
        let (v, p) = fixture(&["solo", "new"], &[&[1.0, 0.0], &[0.9, 0.1]]);
        let t = Taxonomy::from_rows(vec![row("solo", 0, &[])]).unwrap();
        let pl = propose_placement("new", &t, &p, &v).unwrap();
        assert_eq!((pl.upper_similarity, pl.lower_similarity), (-1.0, -1.0));
        assert_eq!(pl.assigned_level, 1);
    }

    #[test]
    fn existing_label_is_rejected() {
        let (v, p) = fixture(&["solo"], &[&[1.0, 0.0]]);
        let t = Taxonomy::from_rows(vec![row("solo", 0, &[])]).unwrap();
        assert_eq!(propose_placement("solo", &t, &p, &v), Err(DiscoveryError::AlreadyExists("solo".into())));
    }

    #[test]
    fn ties_go_to_lower_level_then_id() {
        let (v, p) = fixture(&["b", "a", "c", "new"], &[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let t = Taxonomy::from_rows(vec![row("b", 0, &[]), row("c", 1, &["b"]), row("a", 0, &[])]).unwrap();
        assert_eq!(propose_placement("new", &t, &p, &v).unwrap().parent_id, "a");
    }

    #[test]
    fn json_row_shape() {
        let pl = Placement {
            new_label: "x".into(),
            parent_id: "p".into(),
            assigned_level: 2,
            parent_similarity: 0.5,
            upper_similarity: -1.0,
            lower_similarity: 0.25,
        };
        let row = pl.to_json_row();
        assert_eq!(row["text"], "x");
        assert_eq!(row["level"], 2);
        assert_eq!(row["sims"]["lower"], 0.25);
    }

    proptest! {
        #[test]
        fn placement_is_scale_invariant(seed in 0u64..1000, exp in -8i32..8) {
            use rand::Rng;
            let words = ["r0", "r1", "m0", "m1", "m2", "l0", "l1", "l2", "new"];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..words.len()).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let (v, mut p) = fixture(&words, &refs);
            let t = Taxonomy::from_rows(vec![
                row("r0", 0, &[]), row("r1", 0, &[]),
                row("m0", 1, &["r0"]), row("m1", 1, &["r0", "r1"]), row("m2", 1, &["r1"]),
                row("l0", 2, &["m0"]), row("l1", 2, &["m1"]), row("l2", 2, &["m2", "r0"]),
            ]).unwrap();
            let before = propose_placement("new", &t, &p, &v).unwrap();
            prop_assert!(before.assigned_level <= t.max_level() + 1);
            prop_assert!(before.assigned_level == t.get(&before.parent_id).unwrap().level
                || before.assigned_level == t.get(&before.parent_id).unwrap().level + 1);
            p.weights.embedding *= 2f64.powi(exp);
            let after = propose_placement("new", &t, &p, &v).unwrap();
            prop_assert_eq!(before, after);
        }
    }
}
