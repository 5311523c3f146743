//! Candidate retrieval: cosine similarity between every source and target
//! column, top-k per source, and the exact-name override.

use std::cmp::Ordering;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::table::Table;

pub const DEFAULT_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub source: String,
    pub target: String,
    pub score: f64,
    pub rank: usize,
}

/// Ranked candidates per source column, in source-table column order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchList {
    pub source_table: String,
    pub target_table: String,
    pub k: usize,
    per_source: IndexMap<String, Vec<MatchCandidate>>,
}

/// Descending score, then ascending target name.
pub fn candidate_order(a: &MatchCandidate, b: &MatchCandidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.target.cmp(&b.target))
}

/// Assigns ranks `1..=len` in list order.
pub fn rerank_positions(list: &mut [MatchCandidate]) {
    for (i, c) in list.iter_mut().enumerate() {
        c.rank = i + 1;
    }
}

impl MatchList {
    pub fn new(source_table: impl Into<String>, target_table: impl Into<String>, k: usize) -> Self {
        MatchList {
            source_table: source_table.into(),
            target_table: target_table.into(),
            k,
            per_source: IndexMap::new(),
        }
    }

    /// Stores `candidates` for `source` as given, recomputing ranks.
    pub fn set(&mut self, source: impl Into<String>, mut candidates: Vec<MatchCandidate>) {
        rerank_positions(&mut candidates);
        self.per_source.insert(source.into(), candidates);
    }

    pub fn get(&self, source: &str) -> Option<&[MatchCandidate]> {
        self.per_source.get(source).map(Vec::as_slice)
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.per_source.keys().map(String::as_str)
    }

    pub fn per_source(&self) -> impl Iterator<Item = (&str, &[MatchCandidate])> {
        self.per_source.iter().map(|(s, c)| (s.as_str(), c.as_slice()))
    }

    pub fn candidates(&self) -> impl Iterator<Item = &MatchCandidate> {
        self.per_source.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.per_source.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_json(&self) -> String {
        let file = MatchFile {
            source_table: self.source_table.clone(),
            target_table: self.target_table.clone(),
            matches: self.candidates().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("match list serializes")
    }

    /// Parses a match-list JSON file and checks its ranking invariants.
    pub fn from_json(bytes: &[u8]) -> Result<MatchList> {
        const CTX: &str = "match list";
        let file: MatchFile =
            serde_json::from_slice(bytes).map_err(|e| Error::format(CTX, e.to_string()))?;
        let mut list = MatchList::new(file.source_table, file.target_table, 0);
        let mut current: Option<String> = None;
        for m in file.matches {
            if !m.score.is_finite() {
                return Err(Error::format(CTX, format!("non-finite score for {}/{}", m.source, m.target)));
            }
            if current.as_deref() != Some(m.source.as_str()) {
                if list.per_source.contains_key(&m.source) {
                    return Err(Error::format(CTX, format!("matches for {:?} are not grouped", m.source)));
                }
                current = Some(m.source.clone());
            }
            let entry = list.per_source.entry(m.source.clone()).or_default();
            if let Some(prev) = entry.last() {
                if m.score > prev.score {
                    return Err(Error::format(CTX, format!("scores increase within {:?}", m.source)));
                }
            }
            if m.rank != entry.len() + 1 {
                return Err(Error::format(CTX, format!("rank gap in {:?} at {}", m.source, m.rank)));
            }
            if entry.iter().any(|c| c.target == m.target) {
                return Err(Error::format(CTX, format!("duplicate pair {}/{}", m.source, m.target)));
            }
            entry.push(m);
        }
        list.k = list.per_source.values().map(Vec::len).max().unwrap_or(0);
        Ok(list)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["source", "target", "score", "rank"]).expect("in-memory write");
        for c in self.candidates() {
            w.write_record([
                c.source.as_str(),
                c.target.as_str(),
                &c.score.to_string(),
                &c.rank.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

#[derive(Serialize, Deserialize)]
struct MatchFile {
    source_table: String,
    target_table: String,
    matches: Vec<MatchCandidate>,
}

/// Scores every source against every target by cosine similarity and keeps
/// the top `k` per source.
pub fn retrieve_from_vectors(
    source_table: &str,
    target_table: &str,
    sources: &[(String, EmbeddingVector)],
    targets: &[(String, EmbeddingVector)],
    k: usize,
) -> MatchList {
    let rows: Vec<Vec<MatchCandidate>> = sources
        .par_iter()
        .map(|(s, sv)| {
            let mut row: Vec<MatchCandidate> = targets
                .iter()
                .map(|(t, tv)| MatchCandidate {
                    source: s.clone(),
                    target: t.clone(),
                    score: sv.cosine(tv),
                    rank: 0,
                })
                .collect();
            row.sort_by(candidate_order);
            row.truncate(k);
            row
        })
        .collect();
    let mut list = MatchList::new(source_table, target_table, k);
    for ((s, _), row) in sources.iter().zip(rows) {
        list.set(s.clone(), row);
    }
    list
}

/// Lowercase, then drop everything outside `[a-z0-9]`.
pub fn normalize_name(name: &str) -> String {
    name.to_lowercase()
        .chars()
        .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
        .collect()
}

/// Pins every target whose normalized name equals the source's at score 1.0
/// on top of that source's list. Names that normalize to the empty string
/// never match.
pub fn exact_name_override(mut list: MatchList, source: &Table, target: &Table) -> MatchList {
    let target_norms: Vec<(String, &str)> = target
        .columns()
        .iter()
        .map(|c| (normalize_name(&c.name), c.name.as_str()))
        .collect();
    for col in source.columns() {
        let norm = normalize_name(&col.name);
        if norm.is_empty() {
            continue;
        }
        let mut pinned: Vec<&str> = target_norms
            .iter()
            .filter(|(n, _)| *n == norm)
            .map(|(_, t)| *t)
            .collect();
        if pinned.is_empty() {
            continue;
        }
        pinned.sort_unstable();
        let existing = list.per_source.get(&col.name).cloned().unwrap_or_default();
        let mut updated: Vec<MatchCandidate> = pinned
            .iter()
            .map(|t| MatchCandidate {
                source: col.name.clone(),
                target: t.to_string(),
                score: 1.0,
                rank: 0,
            })
            .collect();
        updated.extend(existing.into_iter().filter(|c| !pinned.contains(&c.target.as_str())));
        rerank_positions(&mut updated);
        list.per_source.insert(col.name.clone(), updated);
    }
    // sources missing from the input list were appended; restore table order
    let order: Vec<&str> = source.columns().iter().map(|c| c.name.as_str()).collect();
    list.per_source.sort_by(|a, _, b, _| {
        let ia = order.iter().position(|n| n == a);
        let ib = order.iter().position(|n| n == b);
        ia.cmp(&ib)
    });
    list
}
