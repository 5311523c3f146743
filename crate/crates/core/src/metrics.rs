//! Ranking quality against a ground truth: mean reciprocal rank and recall
//! at ground-truth size.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{MatchCandidate, MatchList};
use crate::table::GroundTruth;

/// Rank of the first correct target for each ground-truth source column;
/// `None` when no correct target was retrieved.
pub fn first_correct_ranks(list: &MatchList, gt: &GroundTruth) -> BTreeMap<String, Option<usize>> {
    gt.sources()
        .into_iter()
        .map(|s| {
            let rank = list
                .get(s)
                .and_then(|cands| cands.iter().position(|c| gt.contains(s, &c.target)))
                .map(|p| p + 1);
            (s.to_string(), rank)
        })
        .collect()
}

/// Mean over ground-truth source columns of `1 / rank` of the first correct
/// target (0 when absent). An empty ground truth scores 0.
pub fn mrr(list: &MatchList, gt: &GroundTruth) -> f64 {
    let ranks = first_correct_ranks(list, gt);
    if ranks.is_empty() {
        return 0.0;
    }
    let sum: f64 = ranks.values().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum();
    sum / ranks.len() as f64
}

/// Fraction of ground-truth pairs among the `|G|` best-scoring pairs of the
/// whole list (ties by source, then target name).
pub fn recall_at_gt(list: &MatchList, gt: &GroundTruth) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let mut all: Vec<&MatchCandidate> = list.candidates().collect();
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.source.cmp(&b.source))
            .then_with(|| a.target.cmp(&b.target))
    });
    let hits = all
        .iter()
        .take(gt.len())
        .filter(|c| gt.contains(&c.source, &c.target))
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source_table: String,
    pub target_table: String,
    pub mrr: f64,
    pub recall_at_gt: f64,
    pub first_correct_ranks: BTreeMap<String, Option<usize>>,
    pub runtime_secs: f64,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(list: &MatchList, gt: &GroundTruth, runtime_secs: f64, config: serde_json::Value) -> Result<Self> {
        Ok(EvalReport {
            source_table: list.source_table.clone(),
            target_table: list.target_table.clone(),
            mrr: mrr(list, gt),
            recall_at_gt: recall_at_gt(list, gt)?,
            first_correct_ranks: first_correct_ranks(list, gt),
            runtime_secs,
            config,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} -> {}", self.source_table, self.target_table);
        let _ = writeln!(out, "  MRR        {:.4}", self.mrr);
        let _ = writeln!(out, "  Recall@GT  {:.4}", self.recall_at_gt);
        let _ = writeln!(out, "  runtime    {:.3}s", self.runtime_secs);
        let width = self.first_correct_ranks.keys().map(|k| k.chars().count()).max().unwrap_or(0);
        for (source, rank) in &self.first_correct_ranks {
            let rank = rank.map_or_else(|| "-".to_string(), |r| r.to_string());
            let _ = writeln!(out, "  {source:<width$}  {rank}");
        }
        out
    }
}
