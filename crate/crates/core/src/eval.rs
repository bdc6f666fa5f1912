//! Ranking and set metrics over per-level predictions.
//!
//! Ranked lists for P@k and nDCG@k come from a document's accepted labels:
//! per level, in decoder order; pooled, all levels merged by score. Documents
//! without gold labels (at a level, or at all when pooled) are left out of
//! the ranking averages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::PredictionSet;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("nDCG needs a non-empty gold set")]
    EmptyGold,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("prediction {index} has id {predicted:?}, gold has {gold:?}")]
    IdMismatch { index: usize, predicted: String, gold: String },
    #[error("{predictions} predictions for {gold} gold documents")]
    CountMismatch { predictions: usize, gold: usize },
}

/// Gold label averages per level for the MAG paper collection, for display
/// next to measured counts.
pub const MAG_GOLD_AVG_LABELS: [f64; 3] = [0.80, 1.59, 3.64];

pub const P_AT: [usize; 3] = [1, 3, 5];
pub const NDCG_AT: [usize; 2] = [3, 5];

/// `|top-k ∩ gold| / k`; a list shorter than `k` counts the gap as misses.
pub fn precision_at_k<S: AsRef<str>>(ranked: &[S], gold: &BTreeSet<String>, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let hits = ranked.iter().take(k).filter(|r| gold.contains(r.as_ref())).count();
    Ok(hits as f64 / k as f64)
}

/// Binary-gain nDCG@k with the `1 / log2(rank + 1)` discount.
pub fn ndcg_at_k<S: AsRef<str>>(ranked: &[S], gold: &BTreeSet<String>, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, r)| gold.contains(r.as_ref()))
        .map(|(i, _)| discount(i))
        .sum();
    let ideal: f64 = (0..k.min(gold.len())).map(discount).sum();
    Ok(dcg / ideal)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }

    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        Self::new(ratio(tp, fp), ratio(tp, fn_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Micro precision, recall and F1 from TP/FP/FN pooled over documents.
pub fn micro_prf(preds: &[BTreeSet<String>], gold: &[BTreeSet<String>]) -> Prf {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(gold) {
        let hit = p.intersection(g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Prf::from_counts(tp, fp, fn_)
}

pub fn per_label_stats(preds: &[BTreeSet<String>], gold: &[BTreeSet<String>]) -> BTreeMap<String, LabelStats> {
    let mut stats: BTreeMap<String, LabelStats> = BTreeMap::new();
    for (p, g) in preds.iter().zip(gold) {
        for l in p.union(g) {
            let s = stats.entry(l.clone()).or_default();
            match (p.contains(l), g.contains(l)) {
                (true, true) => s.tp += 1,
                (true, false) => s.fp += 1,
                (false, true) => s.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    stats
}

/// Unweighted mean of per-label precision, recall and F1 over labels that
/// occur in the gold data at least once.
pub fn macro_prf(stats: &BTreeMap<String, LabelStats>) -> Prf {
    let per: Vec<Prf> = stats
        .values()
        .filter(|s| s.tp + s.fn_ > 0)
        .map(|s| Prf::from_counts(s.tp, s.fp, s.fn_))
        .collect();
    if per.is_empty() {
        return Prf::default();
    }
    let n = per.len() as f64;
    Prf {
        precision: per.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: per.iter().map(|p| p.recall).sum::<f64>() / n,
        f1: per.iter().map(|p| p.f1).sum::<f64>() / n,
    }
}

/// Mean number of accepted labels per document at each level.
pub fn label_count_stats(predictions: &[PredictionSet], levels: usize) -> BTreeMap<usize, f64> {
    (0..levels)
        .map(|k| {
            let total: usize = predictions.iter().map(|p| p.per_level.get(&k).map_or(0, Vec::len)).sum();
            let mean = if predictions.is_empty() {
                0.0
            } else {
                total as f64 / predictions.len() as f64
            };
            (k, mean)
        })
        .collect()
}

/// Gold labels of one document, by level.
pub type GoldSet = BTreeMap<usize, BTreeSet<String>>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub p_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_: Prf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Metrics at each level; the primary view.
    pub per_level: BTreeMap<usize, LevelMetrics>,
    /// All levels pooled into one label space and one ranking per document.
    pub pooled: LevelMetrics,
    pub avg_labels_per_level: BTreeMap<usize, f64>,
    pub gold_avg_labels_per_level: BTreeMap<usize, f64>,
    pub documents: usize,
}

fn ranking_metrics(ranked: &[Vec<String>], gold: &[BTreeSet<String>]) -> (BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    let scored: Vec<(&Vec<String>, &BTreeSet<String>)> = ranked.iter().zip(gold).filter(|(_, g)| !g.is_empty()).collect();
    let mean = |f: &dyn Fn(&[String], &BTreeSet<String>) -> f64| {
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|(r, g)| f(r, g)).sum::<f64>() / scored.len() as f64
        }
    };
    let p_at = P_AT
        .iter()
        .map(|&k| (k, mean(&|r, g| precision_at_k(r, g, k).expect("k >= 1"))))
        .collect();
    let ndcg_at = NDCG_AT
        .iter()
        .map(|&k| (k, mean(&|r, g| ndcg_at_k(r, g, k).expect("gold is non-empty"))))
        .collect();
    (p_at, ndcg_at)
}

fn level_metrics(ranked: &[Vec<String>], gold: &[BTreeSet<String>]) -> LevelMetrics {
    let (p_at, ndcg_at) = ranking_metrics(ranked, gold);
    let preds: Vec<BTreeSet<String>> = ranked.iter().map(|r| r.iter().cloned().collect()).collect();
    LevelMetrics {
        p_at,
        ndcg_at,
        micro: micro_prf(&preds, gold),
        macro_: macro_prf(&per_label_stats(&preds, gold)),
    }
}

/// Labels of a document pooled across levels, best score first.
pub fn pooled_ranking(p: &PredictionSet) -> Vec<String> {
    let mut all: Vec<(usize, &str, f64)> = p
        .per_level
        .iter()
        .flat_map(|(k, v)| v.iter().map(move |s| (*k, s.label.as_str(), s.score)))
        .collect();
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then_with(|| a.1.cmp(b.1)));
    all.into_iter().map(|(_, l, _)| l.to_string()).collect()
}

/// Full report over aligned predictions and gold sets.
pub fn evaluate(predictions: &[PredictionSet], gold: &[GoldSet], levels: usize) -> Result<MetricsReport, EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::CountMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    let mut per_level = BTreeMap::new();
    let mut gold_avg = BTreeMap::new();
    for k in 0..levels {
        let ranked: Vec<Vec<String>> = predictions.iter().map(|p| p.labels_at(k).map(str::to_string).collect()).collect();
        let g: Vec<BTreeSet<String>> = gold.iter().map(|g| g.get(&k).cloned().unwrap_or_default()).collect();
        let total: usize = g.iter().map(BTreeSet::len).sum();
        gold_avg.insert(k, if gold.is_empty() { 0.0 } else { total as f64 / gold.len() as f64 });
        per_level.insert(k, level_metrics(&ranked, &g));
    }
    let ranked: Vec<Vec<String>> = predictions.iter().map(pooled_ranking).collect();
    let g: Vec<BTreeSet<String>> = gold.iter().map(|g| g.values().flatten().cloned().collect()).collect();
    Ok(MetricsReport {
        per_level,
        pooled: level_metrics(&ranked, &g),
        avg_labels_per_level: label_count_stats(predictions, levels),
        gold_avg_labels_per_level: gold_avg,
        documents: predictions.len(),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Per-level metric table followed by the pooled row.
    pub fn render_table(&self) -> String {
        let mut out = String::from("level    P@1     P@3     P@5     N@3     N@5     µP      µR      µF1     MP      MR      MF1\n");
        let row = |out: &mut String, name: &str, m: &LevelMetrics| {
            let _ = write!(out, "{name:<8}");
            for v in m.p_at.values().chain(m.ndcg_at.values()) {
                let _ = write!(out, " {v:.4} ");
            }
            for p in [m.micro, m.macro_] {
                let _ = write!(out, " {:.4}  {:.4}  {:.4} ", p.precision, p.recall, p.f1);
            }
            out.push('\n');
        };
        for (k, m) in &self.per_level {
            row(&mut out, &format!("L{k}"), m);
        }
        row(&mut out, "all", &self.pooled);
        out
    }

    /// Mean labels per document by level, next to the MAG gold reference.
    pub fn render_count_table(&self) -> String {
        let mut out = String::from("source     ");
        for k in self.avg_labels_per_level.keys() {
            let _ = write!(out, " Lv{k:<5}");
        }
        out.push('\n');
        let mut line = |name: &str, values: Vec<Option<f64>>| {
            let _ = write!(out, "{name:<11}");
            for v in values {
                match v {
                    Some(v) => {
                        let _ = write!(out, " {v:<7.2}");
                    }
                    None => out.push_str(" -      "),
                }
            }
            out.push('\n');
        };
        let levels: Vec<usize> = self.avg_labels_per_level.keys().copied().collect();
        line("MAG gold", levels.iter().map(|&k| MAG_GOLD_AVG_LABELS.get(k).copied()).collect());
        line("gold", levels.iter().map(|k| self.gold_avg_labels_per_level.get(k).copied()).collect());
        line("predicted", levels.iter().map(|k| self.avg_labels_per_level.get(k).copied()).collect());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::ScoredLabel;
    use proptest::prelude::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn precision_examples() {
        let g = set(&["b", "c"]);
        assert_eq!(precision_at_k(&["b", "a"], &g, 1).unwrap(), 1.0);
        assert_eq!(precision_at_k(&["b", "a"], &g, 2).unwrap(), 0.5);
        assert_eq!(precision_at_k::<&str>(&[], &g, 3).unwrap(), 0.0);
        assert_eq!(precision_at_k(&["b"], &g, 0), Err(EvalError::ZeroK));
    }

    #[test]
    fn ndcg_examples() {
        let g = set(&["a", "c"]);
        assert_eq!(ndcg_at_k(&["a", "c", "x"], &g, 3).unwrap(), 1.0);
        let v = ndcg_at_k(&["a", "x", "c"], &g, 3).unwrap();
        let hand = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((v - hand).abs() < 1e-15);
        assert!((v - 0.9197).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&["x", "y"], &g, 2).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&["x"], &BTreeSet::new(), 2), Err(EvalError::EmptyGold));
    }

    #[test]
    fn micro_examples() {
        let p = micro_prf(&[set(&["a", "b"])], &[set(&["b", "c"])]);
        assert_eq!(p, Prf::new(0.5, 0.5));
        assert_eq!(p.f1, 0.5);
        let same = micro_prf(&[set(&["a"]), set(&["b"])], &[set(&["a"]), set(&["b"])]);
        assert_eq!(same, Prf::new(1.0, 1.0));
        let none = micro_prf(&[set(&["x"])], &[set(&["a"])]);
        assert_eq!(none, Prf::default());
        let empty = micro_prf(&[set(&[])], &[set(&["a"])]);
        assert_eq!(empty.precision, 0.0);
    }

    #[test]
    fn macro_examples() {
        let mut stats = BTreeMap::new();
        stats.insert("a".to_string(), LabelStats { tp: 1, fp: 0, fn_: 0 });
        stats.insert("b".to_string(), LabelStats { tp: 0, fp: 1, fn_: 1 });
        assert_eq!(macro_prf(&stats).f1, 0.5);

        let mut one = BTreeMap::new();
        one.insert("a".to_string(), LabelStats { tp: 3, fp: 0, fn_: 0 });
        assert_eq!(macro_prf(&one), Prf::new(1.0, 1.0));

        // per-label (p, r) = (1, 0.5) and (0.5, 1)
        let mut two = BTreeMap::new();
        two.insert("a".to_string(), LabelStats { tp: 1, fp: 0, fn_: 1 });
        two.insert("b".to_string(), LabelStats { tp: 1, fp: 1, fn_: 0 });
        let m = macro_prf(&two);
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.75);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);

        // predicted but never gold: excluded
        let mut fp_only = two.clone();
        fp_only.insert("z".to_string(), LabelStats { tp: 0, fp: 4, fn_: 0 });
        assert_eq!(macro_prf(&fp_only), m);
    }

    fn prediction(levels: &[&[(&str, f64)]]) -> PredictionSet {
        let mut p = PredictionSet::default();
        for (k, labels) in levels.iter().enumerate() {
            p.per_level.insert(
                k,
                labels
                    .iter()
                    .map(|(l, s)| ScoredLabel {
                        label: l.to_string(),
                        score: *s,
                    })
                    .collect(),
            );
        }
        p
    }

    #[test]
    fn count_examples() {
        let preds = vec![prediction(&[&[("a", 0.0)]]), prediction(&[&[("a", 0.0), ("b", -1.0)]])];
        assert_eq!(label_count_stats(&preds, 1)[&0], 1.5);
        let empty = vec![PredictionSet::default(); 3];
        assert!(label_count_stats(&empty, 3).values().all(|&v| v == 0.0));
        assert_eq!(MAG_GOLD_AVG_LABELS, [0.80, 1.59, 3.64]);
    }

    #[test]
    fn pooled_ranking_merges_levels_by_score() {
        let p = prediction(&[&[("a", -0.5)], &[("b", -0.1), ("c", -0.9)]]);
        assert_eq!(pooled_ranking(&p), ["b", "a", "c"]);
    }

    #[test]
    fn report_on_perfect_and_empty_predictions() {
        let gold: Vec<GoldSet> = vec![
            [(0, set(&["a"])), (1, set(&["a1", "a2"]))].into_iter().collect(),
            [(0, set(&["b"])), (1, set(&["b1"]))].into_iter().collect(),
        ];
        let perfect = vec![
            prediction(&[&[("a", 0.0)], &[("a1", 0.0), ("a2", -0.1)]]),
            prediction(&[&[("b", 0.0)], &[("b1", 0.0)]]),
        ];
        let r = evaluate(&perfect, &gold, 2).unwrap();
        assert_eq!(r.pooled.micro.f1, 1.0);
        assert_eq!(r.per_level[&1].micro.f1, 1.0);
        assert_eq!(r.per_level[&0].p_at[&1], 1.0);
        assert_eq!(r.gold_avg_labels_per_level[&1], 1.5);
        let r = evaluate(&vec![PredictionSet::default(); 2], &gold, 2).unwrap();
        assert_eq!(r.pooled.micro.f1, 0.0);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(json["per_level"]["0"]["p_at"]["1"].is_number());
        assert!(json["pooled"]["macro"]["f1"].is_number());
        assert!(r.render_count_table().contains("0.80"));
        assert!(evaluate(&[], &gold, 2).is_err());
    }

    // Reference implementations written independently of the code above.
    fn naive_p_at(ranked: &[String], gold: &BTreeSet<String>, k: usize) -> f64 {
        let mut hits = 0.0;
        for i in 0..k {
            if i < ranked.len() && gold.iter().any(|g| *g == ranked[i]) {
                hits += 1.0;
            }
        }
        hits / k as f64
    }

    fn naive_ndcg(ranked: &[String], gold: &BTreeSet<String>, k: usize) -> f64 {
        let mut dcg = 0.0;
        for (i, r) in ranked.iter().enumerate() {
            if i >= k {
                break;
            }
            if gold.contains(r) {
                dcg += 1.0 / (2.0 + i as f64).ln() * std::f64::consts::LN_2;
            }
        }
        let mut ideal = 0.0;
        for i in 0..gold.len().min(k) {
            ideal += 1.0 / (2.0 + i as f64).ln() * std::f64::consts::LN_2;
        }
        dcg / ideal
    }

    fn naive_f1(p: f64, r: f64) -> f64 {
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn naive_micro(preds: &[BTreeSet<String>], gold: &[BTreeSet<String>]) -> (f64, f64, f64) {
        let mut pairs_p = Vec::new();
        let mut pairs_g = Vec::new();
        for (d, (p, g)) in preds.iter().zip(gold).enumerate() {
            pairs_p.extend(p.iter().map(|l| (d, l.clone())));
            pairs_g.extend(g.iter().map(|l| (d, l.clone())));
        }
        let tp = pairs_p.iter().filter(|x| pairs_g.contains(x)).count() as f64;
        let p = if pairs_p.is_empty() { 0.0 } else { tp / pairs_p.len() as f64 };
        let r = if pairs_g.is_empty() { 0.0 } else { tp / pairs_g.len() as f64 };
        (p, r, naive_f1(p, r))
    }

    fn naive_macro(preds: &[BTreeSet<String>], gold: &[BTreeSet<String>]) -> (f64, f64, f64) {
        let labels: BTreeSet<&String> = gold.iter().flatten().collect();
        let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
        for l in &labels {
            let in_p: Vec<bool> = preds.iter().map(|p| p.contains(*l)).collect();
            let in_g: Vec<bool> = gold.iter().map(|g| g.contains(*l)).collect();
            let tp = in_p.iter().zip(&in_g).filter(|(a, b)| **a && **b).count() as f64;
            let np = in_p.iter().filter(|a| **a).count() as f64;
            let ng = in_g.iter().filter(|a| **a).count() as f64;
            let p = if np == 0.0 { 0.0 } else { tp / np };
            let r = tp / ng;
            sp += p;
            sr += r;
            sf += naive_f1(p, r);
        }
        if labels.is_empty() {
            return (0.0, 0.0, 0.0);
        }
        let n = labels.len() as f64;
        (sp / n, sr / n, sf / n)
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<String>>, Vec<BTreeSet<String>>)> {
        let label = prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]).prop_map(String::from);
        let doc = (
            prop::collection::vec(label.clone(), 0..6).prop_map(|mut v| {
                let mut seen = BTreeSet::new();
                v.retain(|x| seen.insert(x.clone()));
                v
            }),
            prop::collection::btree_set(label, 1..4),
        );
        prop::collection::vec(doc, 1..6).prop_map(|docs| docs.into_iter().unzip())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn metrics_match_naive_reference((ranked, gold) in instance()) {
            for (r, g) in ranked.iter().zip(&gold) {
                for k in 1..6 {
                    prop_assert!((precision_at_k(r, g, k).unwrap() - naive_p_at(r, g, k)).abs() <= 1e-12);
                    let n = ndcg_at_k(r, g, k).unwrap();
                    prop_assert!((n - naive_ndcg(r, g, k)).abs() <= 1e-12);
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
                }
            }
            let preds: Vec<BTreeSet<String>> = ranked.iter().map(|r| r.iter().cloned().collect()).collect();
            let m = micro_prf(&preds, &gold);
            let (p, r, f) = naive_micro(&preds, &gold);
            prop_assert!((m.precision - p).abs() <= 1e-12 && (m.recall - r).abs() <= 1e-12 && (m.f1 - f).abs() <= 1e-12);
            let mac = macro_prf(&per_label_stats(&preds, &gold));
            let (p, r, f) = naive_macro(&preds, &gold);
            prop_assert!((mac.precision - p).abs() <= 1e-12 && (mac.recall - r).abs() <= 1e-12 && (mac.f1 - f).abs() <= 1e-12);
            for v in [m.precision, m.recall, m.f1, mac.precision, mac.recall, mac.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn micro_is_monotone((ranked, gold) in instance(), doc in 0usize..6, pick in 0usize..6) {
            let mut preds: Vec<BTreeSet<String>> = ranked.iter().map(|r| r.iter().cloned().collect()).collect();
            let d = doc % preds.len();
            let before = micro_prf(&preds, &gold);
            let missing: Vec<String> = gold[d].difference(&preds[d]).cloned().collect();
            if !missing.is_empty() {
                let mut more = preds.clone();
                more[d].insert(missing[pick % missing.len()].clone());
                prop_assert!(micro_prf(&more, &gold).recall >= before.recall);
            }
            preds[d].insert("zz".to_string());
            prop_assert!(micro_prf(&preds, &gold).precision <= before.precision);
        }
    }
}
