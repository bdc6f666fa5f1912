//! The hierarchical label space.
//!
//! A taxonomy is a DAG of labels, each carrying a stored level. Edges always
//! point strictly downward; edges that skip one or more levels are legal and
//! recorded separately in [`Taxonomy::cross_level_edges`].
//!
//! The on-disk form is a UTF-8 TSV with the header `id\tname\tlevel\tparents`,
//! where `parents` is a `;`-separated list of ids (empty for roots) and lines
//! starting with `#` are comments.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

pub const TSV_HEADER: &str = "id\tname\tlevel\tparents";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("duplicate label name {0:?}")]
    DuplicateName(String),
    #[error("duplicate label id {0:?}")]
    DuplicateId(String),
    #[error("label {child:?} references unknown parent {parent:?}")]
    UnknownParentRef { child: String, parent: String },
    #[error("edge {parent:?} -> {child:?} does not point to a deeper level")]
    UpwardEdge { parent: String, child: String },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("taxonomy has no labels")]
    EmptyTaxonomy,
    #[error("taxonomy has no label at level 0")]
    NoRootLevel,
    #[error("level {level} out of range (max level {max_level})")]
    LevelOutOfRange { level: usize, max_level: usize },
    #[error("unknown label id {0:?}")]
    UnknownLabel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label {
    pub id: String,
    pub name: String,
    pub level: usize,
}

impl Label {
    pub fn new(id: impl Into<String>, name: impl Into<String>, level: usize) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            level,
        }
    }
}

/// One input row: a label plus the ids of its parents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRow {
    pub label: Label,
    pub parents: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    labels: Vec<Label>,
    by_id: HashMap<String, usize>,
    by_name: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    cross_level: Vec<(usize, usize)>,
    by_level: Vec<Vec<usize>>,
    max_level: usize,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.label_set() == other.label_set() && self.edge_set() == other.edge_set()
    }
}

impl Eq for Taxonomy {}

impl Taxonomy {
    /// Validates rows and builds the taxonomy. Row order is preserved.
    pub fn from_rows(rows: Vec<LabelRow>) -> Result<Self, TaxonomyError> {
        if rows.is_empty() {
            return Err(TaxonomyError::EmptyTaxonomy);
        }
        let mut by_id = HashMap::with_capacity(rows.len());
        let mut by_name = HashMap::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let label = &row.label;
            if label.id.is_empty() || label.name.is_empty() {
                return Err(TaxonomyError::MalformedRow {
                    line: i + 1,
                    reason: "empty id or name".into(),
                });
            }
            if by_id.insert(label.id.clone(), i).is_some() {
                return Err(TaxonomyError::DuplicateId(label.id.clone()));
            }
            if by_name.insert(label.name.clone(), i).is_some() {
                return Err(TaxonomyError::DuplicateName(label.name.clone()));
            }
            labels.push(label.clone());
        }

        let n = labels.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let mut edges = Vec::new();
        let mut cross_level = Vec::new();
        for (child, row) in rows.iter().enumerate() {
            for pid in &row.parents {
                let parent = *by_id.get(pid).ok_or_else(|| TaxonomyError::UnknownParentRef {
                    child: row.label.id.clone(),
                    parent: pid.clone(),
                })?;
                if labels[child].level <= labels[parent].level {
                    return Err(TaxonomyError::UpwardEdge {
                        parent: pid.clone(),
                        child: row.label.id.clone(),
                    });
                }
                if parents[child].contains(&parent) {
                    continue;
                }
                parents[child].push(parent);
                children[parent].push(child);
                edges.push((parent, child));
                if labels[child].level != labels[parent].level + 1 {
                    cross_level.push((parent, child));
                }
            }
        }

        let max_level = labels.iter().map(|l| l.level).max().unwrap_or(0);
        let mut by_level = vec![Vec::new(); max_level + 1];
        for (i, l) in labels.iter().enumerate() {
            by_level[l.level].push(i);
        }
        if by_level[0].is_empty() {
            return Err(TaxonomyError::NoRootLevel);
        }

        Ok(Self {
            labels,
            by_id,
            by_name,
            parents,
            children,
            edges,
            cross_level,
            by_level,
            max_level,
        })
    }

    /// Parses the TSV form.
    pub fn parse_tsv(source: &str) -> Result<Self, TaxonomyError> {
        let mut rows = Vec::new();
        let mut seen_header = false;
        for (idx, raw) in source.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if !seen_header {
                if line != TSV_HEADER {
                    return Err(TaxonomyError::MalformedRow {
                        line: line_no,
                        reason: format!("expected header {TSV_HEADER:?}"),
                    });
                }
                seen_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(TaxonomyError::MalformedRow {
                    line: line_no,
                    reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            let level = fields[2].trim().parse::<usize>().map_err(|e| TaxonomyError::MalformedRow {
                line: line_no,
                reason: format!("bad level {:?}: {e}", fields[2]),
            })?;
            let parents = fields[3]
                .split(';')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(String::from)
                .collect();
            rows.push(LabelRow {
                label: Label::new(fields[0].trim(), fields[1], level),
                parents,
            });
        }
        Self::from_rows(rows)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(TSV_HEADER);
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            let parents: Vec<&str> = self.parents[i].iter().map(|&p| self.labels[p].id.as_str()).collect();
            let _ = writeln!(out, "{}\t{}\t{}\t{}", l.id, l.name, l.level, parents.join(";"));
        }
        out
    }

    pub fn rows(&self) -> Vec<LabelRow> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| LabelRow {
                label: l.clone(),
                parents: self.parents[i].iter().map(|&p| self.labels[p].id.clone()).collect(),
            })
            .collect()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn labels_at_level(&self, level: usize) -> Result<Vec<&Label>, TaxonomyError> {
        let idx = self.by_level.get(level).ok_or(TaxonomyError::LevelOutOfRange {
            level,
            max_level: self.max_level,
        })?;
        Ok(idx.iter().map(|&i| &self.labels[i]).collect())
    }

    /// Exact, case-sensitive name lookup.
    pub fn contains_name(&self, name: &str) -> Option<&Label> {
        self.by_name.get(name).map(|&i| &self.labels[i])
    }

    pub fn get(&self, id: &str) -> Option<&Label> {
        self.by_id.get(id).map(|&i| &self.labels[i])
    }

    pub fn parents_of(&self, id: &str) -> Result<Vec<&Label>, TaxonomyError> {
        let i = self.index_of(id)?;
        Ok(self.parents[i].iter().map(|&p| &self.labels[p]).collect())
    }

    pub fn children_of(&self, id: &str) -> Result<Vec<&Label>, TaxonomyError> {
        let i = self.index_of(id)?;
        Ok(self.children[i].iter().map(|&c| &self.labels[c]).collect())
    }

    /// All ancestors of a label (transitive parents), excluding itself.
    pub fn ancestors_of(&self, id: &str) -> Result<Vec<&Label>, TaxonomyError> {
        let start = self.index_of(id)?;
        let mut seen = BTreeSet::new();
        let mut stack = self.parents[start].clone();
        while let Some(p) = stack.pop() {
            if seen.insert(p) {
                stack.extend(self.parents[p].iter().copied());
            }
        }
        Ok(seen.into_iter().map(|i| &self.labels[i]).collect())
    }

    /// `(parent_id, child_id)` pairs.
    pub fn edges(&self) -> Vec<(&str, &str)> {
        self.edges
            .iter()
            .map(|&(p, c)| (self.labels[p].id.as_str(), self.labels[c].id.as_str()))
            .collect()
    }

    /// Edges whose child sits more than one level below the parent.
    pub fn cross_level_edges(&self) -> Vec<(&str, &str)> {
        self.cross_level
            .iter()
            .map(|&(p, c)| (self.labels[p].id.as_str(), self.labels[c].id.as_str()))
            .collect()
    }

    fn index_of(&self, id: &str) -> Result<usize, TaxonomyError> {
        self.by_id
            .get(id)
            .copied()
            .ok_or_else(|| TaxonomyError::UnknownLabel(id.to_string()))
    }

    fn label_set(&self) -> BTreeSet<&Label> {
        self.labels.iter().collect()
    }

    fn edge_set(&self) -> BTreeSet<(&str, &str)> {
        self.edges().into_iter().collect()
    }
}
