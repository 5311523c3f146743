//! Fine-tuning a linear projection over frozen embeddings with batch-hard
//! triplet loss.
//!
//! Columns of the same training class are positives, all others negatives.
//! For each anchor the farthest positive and the nearest negative in the
//! batch form the triplet; distances are cosine distances `1 - cos`. The
//! head maps a base embedding `v` to `normalize(W v)` and starts from the
//! identity; the best head by validation score is kept.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::TrainingClass;
use crate::embedding::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::metrics::{mrr, recall_at_gt};
use crate::retrieval::{candidate_order, MatchCandidate, MatchList};
use crate::sampling::SamplerConfig;
use crate::serialize::{SerializationConfig, SerializedColumn};
use crate::table::GroundTruth;

/// Consecutive unchanged validation scores that end training.
pub const PATIENCE: usize = 5;
const SCORE_TOLERANCE: f64 = 1e-9;
const HEAD_MAGIC: &[u8; 8] = b"COLHEAD1";

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Embeddings with class labels. For [`batch_hard_loss`] the vectors are the
/// embeddings themselves; for [`loss_gradient`] they are the base vectors
/// fed through the head.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchHardLoss {
    pub loss: f64,
    /// Hardest `(positive, negative)` per anchor; `None` when the anchor has
    /// no positive or no negative in the batch.
    pub hardest: Vec<Option<(usize, usize)>>,
}

/// Hardest positive and negative of every anchor under a distance matrix.
/// Ties go to the lower index.
fn hardest_pairs(dist: &[Vec<f64>], labels: &[usize]) -> Vec<Option<(usize, usize)>> {
    (0..labels.len())
        .map(|a| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..labels.len() {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| dist[a][j] > dist[a][p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| dist[a][j] < dist[a][n]) {
                    neg = Some(j);
                }
            }
            pos.zip(neg)
        })
        .collect()
}

fn distance_matrix(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    vectors
        .iter()
        .map(|a| vectors.iter().map(|b| cosine_distance(a, b)).collect())
        .collect()
}

/// `sum_a max(0, m + D(a, hardest p) - D(a, hardest n))`.
pub fn batch_hard_loss(batch: &TripletBatch, margin: f64) -> BatchHardLoss {
    let dist = distance_matrix(&batch.vectors);
    let hardest = hardest_pairs(&dist, &batch.labels);
    let loss = hardest
        .iter()
        .enumerate()
        .filter_map(|(a, h)| h.map(|(p, n)| (margin + dist[a][p] - dist[a][n]).max(0.0)))
        .sum();
    BatchHardLoss { loss, hardest }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningCategory {
    HardPositivePair,
    HardestNegative,
    SemiHardNegative,
    Easy,
}

/// Classifies the triplet `(a, p, n)` within `batch` (embeddings).
pub fn mine_category(a: usize, p: usize, n: usize, batch: &TripletBatch, margin: f64) -> MiningCategory {
    let d = |i: usize, j: usize| cosine_distance(&batch.vectors[i], &batch.vectors[j]);
    let (dap, dan) = (d(a, p), d(a, n));
    let others = |same: bool| {
        (0..batch.len()).filter(move |&j| j != a && (batch.labels[j] == batch.labels[a]) == same)
    };
    if dap < dan && dan < dap + margin {
        return MiningCategory::SemiHardNegative;
    }
    let min_neg = others(false).map(|j| d(a, j)).fold(f64::INFINITY, f64::min);
    if dan <= min_neg && dan > dap + margin {
        return MiningCategory::HardestNegative;
    }
    let max_pos = others(true).map(|j| d(a, j)).fold(f64::NEG_INFINITY, f64::max);
    if dap >= max_pos && dap < dan {
        return MiningCategory::HardPositivePair;
    }
    MiningCategory::Easy
}

/// `W v` for a row-major `dim x dim` matrix.
fn mat_vec(w: &[f64], v: &[f64]) -> Vec<f64> {
    let dim = v.len();
    (0..dim).map(|r| dot(&w[r * dim..(r + 1) * dim], v)).collect()
}

/// `normalize(W v)`, or `v` unchanged when `W v` is zero. Also returns the
/// pre-normalization norm (0 on the fallback).
fn project(w: &[f64], v: &[f64]) -> (Vec<f64>, f64) {
    let z = mat_vec(w, v);
    let norm = dot(&z, &z).sqrt();
    if norm == 0.0 {
        return (v.to_vec(), 0.0);
    }
    (z.into_iter().map(|x| x / norm).collect(), norm)
}

/// Batch-hard loss of the projected batch and its gradient with respect to
/// the row-major `W`, holding the hardest-pair selection fixed.
pub fn loss_gradient(batch: &TripletBatch, margin: f64, w: &[f64]) -> (f64, Vec<f64>) {
    let dim = batch.vectors.first().map_or(0, Vec::len);
    let projected: Vec<(Vec<f64>, f64)> = batch.vectors.iter().map(|v| project(w, v)).collect();
    let e: Vec<Vec<f64>> = projected.iter().map(|p| p.0.clone()).collect();
    let dist = distance_matrix(&e);
    let hardest = hardest_pairs(&dist, &batch.labels);

    // dL/de for every member
    let mut ge = vec![vec![0.0; dim]; batch.len()];
    let mut loss = 0.0;
    for (a, h) in hardest.iter().enumerate() {
        let Some((p, n)) = *h else { continue };
        let term = margin + dist[a][p] - dist[a][n];
        if term <= 0.0 {
            continue;
        }
        loss += term;
        // D(x, y) = 1 - x.y on unit vectors
        for k in 0..dim {
            ge[a][k] += e[n][k] - e[p][k];
            ge[p][k] -= e[a][k];
            ge[n][k] += e[a][k];
        }
    }

    let mut grad = vec![0.0; dim * dim];
    for (i, v) in batch.vectors.iter().enumerate() {
        let norm = projected[i].1;
        if norm == 0.0 {
            continue;
        }
        // through e = z / |z|: dL/dz = (g - e (e.g)) / |z|
        let eg = dot(&e[i], &ge[i]);
        for r in 0..dim {
            let gz = (ge[i][r] - e[i][r] * eg) / norm;
            if gz == 0.0 {
                continue;
            }
            let row = &mut grad[r * dim..(r + 1) * dim];
            for (g, x) in row.iter_mut().zip(v) {
                *g += gz * x;
            }
        }
    }
    (loss, grad)
}

/// A trained (or identity) linear head over base embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub weights: Vec<f32>,
    pub trained: bool,
    pub seed: u64,
    pub score: f64,
}

impl ProjectionHead {
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0f32; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        ProjectionHead { dim, weights, trained: false, seed: 0, score: 0.0 }
    }

    fn from_f64(dim: usize, w: &[f64], seed: u64, score: f64) -> Self {
        ProjectionHead {
            dim,
            weights: w.iter().map(|&x| x as f32).collect(),
            trained: true,
            seed,
            score,
        }
    }

    fn weights_f64(&self) -> Vec<f64> {
        self.weights.iter().map(|&x| x as f64).collect()
    }

    pub fn apply(&self, v: &EmbeddingVector) -> Result<EmbeddingVector> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: v.dim() });
        }
        let base = v.to_f64();
        let z = mat_vec(&self.weights_f64(), &base);
        if z.iter().all(|&x| x == 0.0) {
            return Ok(v.clone());
        }
        Ok(EmbeddingVector::from_raw(&z))
    }

    /// Magic, `u32` dimension, `u8` trained flag, `u64` seed, `f64` score,
    /// then the row-major `f32` weights; all little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + 4 * self.weights.len());
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(self.trained as u8);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.score.to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const CTX: &str = "projection head";
        let bad = |m: &str| Error::format(CTX, m);
        let rest = bytes.strip_prefix(HEAD_MAGIC.as_slice()).ok_or_else(|| bad("bad magic"))?;
        if rest.len() < 21 {
            return Err(bad("truncated header"));
        }
        let dim = u32::from_le_bytes(rest[0..4].try_into().expect("4 bytes")) as usize;
        let trained = match rest[4] {
            0 => false,
            1 => true,
            _ => return Err(bad("bad trained flag")),
        };
        let seed = u64::from_le_bytes(rest[5..13].try_into().expect("8 bytes"));
        let score = f64::from_le_bytes(rest[13..21].try_into().expect("8 bytes"));
        let body = &rest[21..];
        let expected = dim.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(|| bad("dimension too large"))?;
        if dim == 0 || body.len() != expected {
            return Err(bad("weight block does not match the dimension"));
        }
        let weights: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if weights.iter().any(|w| !w.is_finite()) || !score.is_finite() {
            return Err(bad("non-finite value"));
        }
        Ok(ProjectionHead { dim, weights, trained, seed, score })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Classes per batch.
    pub batch_classes: usize,
    /// Members per class in a batch.
    pub batch_members: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub serialization: SerializationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.5,
            learning_rate: 0.05,
            epochs: 30,
            batch_classes: 8,
            batch_members: 4,
            validation_fraction: 0.2,
            seed: 0,
            sampler: SamplerConfig::default(),
            serialization: SerializationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.batch_classes < 2 || self.batch_members < 2 {
            return Err(Error::Config("batches need at least 2 classes of 2 members".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation fraction must be in (0, 1)".into()));
        }
        self.sampler.validate()?;
        self.serialization.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-anchor loss over the whole training split, identity head.
    pub initial_loss: f64,
    /// The same after the last epoch.
    pub final_loss: f64,
    pub identity_score: f64,
    pub best_score: f64,
    /// 0 when no epoch beat the identity head.
    pub best_epoch: usize,
    pub epoch_scores: Vec<f64>,
    pub train_classes: Vec<usize>,
    pub validation_classes: Vec<usize>,
}

struct Member {
    class: usize,
    vector: Vec<f64>,
}

/// Trains a head on `classes` and returns the best one by validation score
/// `(MRR + Recall@GT) / 2`.
pub fn train(classes: &[TrainingClass], embedder: &Embedder, config: &TrainConfig) -> Result<(ProjectionHead, TrainReport)> {
    config.validate()?;
    if classes.len() < 4 {
        return Err(Error::TooFewClasses(classes.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let texts: Vec<String> = classes
        .iter()
        .flat_map(|c| c.members.iter())
        .map(|m| SerializedColumn::from_values(&m.name, &m.values, &config.sampler).render(&config.serialization))
        .collect();
    let vectors = embedder.embed_batch(&texts)?;
    let dim = embedder.dimension();
    let mut vectors = vectors.into_iter();
    let members: Vec<Vec<Member>> = classes
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            c.members
                .iter()
                .map(|_| Member { class: ci, vector: vectors.next().expect("one vector per member").to_f64() })
                .collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((classes.len() as f64 * config.validation_fraction).round() as usize).clamp(2, classes.len() - 2);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    let mut w = identity(dim);
    let initial_loss = split_loss(&members, &train_idx, config.margin, &w);
    let identity_score = validation_score(&members, &val_idx, &to_f32_f64(&w));
    let mut best = (identity_score, 0usize, w.clone());
    let mut epoch_scores = Vec::new();
    let mut last_score = identity_score;
    let mut unchanged = 0usize;

    for epoch in 1..=config.epochs {
        for batch in epoch_batches(&members, &train_idx, config, &mut rng) {
            let anchors = batch.len() as f64;
            let (_, grad) = loss_gradient(&batch, config.margin, &w);
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= config.learning_rate * gi / anchors;
            }
        }
        let score = validation_score(&members, &val_idx, &to_f32_f64(&w));
        log::info!("epoch {epoch}: validation score {score:.6}");
        epoch_scores.push(score);
        if score > best.0 {
            best = (score, epoch, w.clone());
        }
        if (score - last_score).abs() <= SCORE_TOLERANCE {
            unchanged += 1;
            if unchanged >= PATIENCE {
                log::info!("validation score unchanged for {PATIENCE} epochs; stopping");
                break;
            }
        } else {
            unchanged = 0;
        }
        last_score = score;
    }

    let final_loss = split_loss(&members, &train_idx, config.margin, &w);
    let head = ProjectionHead::from_f64(dim, &best.2, config.seed, best.0);
    let report = TrainReport {
        initial_loss,
        final_loss,
        identity_score,
        best_score: best.0,
        best_epoch: best.1,
        epoch_scores,
        train_classes: train_idx,
        validation_classes: val_idx,
    };
    Ok((head, report))
}

fn identity(dim: usize) -> Vec<f64> {
    let mut w = vec![0.0; dim * dim];
    for i in 0..dim {
        w[i * dim + i] = 1.0;
    }
    w
}

/// Rounds through `f32` so scores describe the head exactly as stored.
fn to_f32_f64(w: &[f64]) -> Vec<f64> {
    w.iter().map(|&x| x as f32 as f64).collect()
}

/// Mean per-anchor batch-hard loss with all members of `split` in one batch.
fn split_loss(members: &[Vec<Member>], split: &[usize], margin: f64, w: &[f64]) -> f64 {
    let all: Vec<&Member> = split.iter().flat_map(|&c| members[c].iter()).collect();
    let batch = TripletBatch {
        vectors: all.iter().map(|m| project(w, &m.vector).0).collect(),
        labels: all.iter().map(|m| m.class).collect(),
    };
    batch_hard_loss(&batch, margin).loss / batch.len().max(1) as f64
}

fn epoch_batches(members: &[Vec<Member>], split: &[usize], config: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<TripletBatch> {
    let mut order = split.to_vec();
    order.shuffle(rng);
    let mut groups: Vec<Vec<usize>> = order.chunks(config.batch_classes).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() < 2) {
        let last = groups.pop().expect("checked above");
        groups.last_mut().expect("checked above").extend(last);
    }
    groups
        .into_iter()
        .map(|group| {
            let mut batch = TripletBatch { vectors: Vec::new(), labels: Vec::new() };
            for c in group {
                let pool = &members[c];
                let picks: Vec<usize> = if pool.len() >= config.batch_members {
                    rand::seq::index::sample(rng, pool.len(), config.batch_members).into_vec()
                } else {
                    (0..config.batch_members).map(|_| rng.random_range(0..pool.len())).collect()
                };
                for p in picks {
                    batch.vectors.push(pool[p].vector.clone());
                    batch.labels.push(c);
                }
            }
            batch
        })
        .collect()
}

/// Every validation member is matched against all other validation members;
/// same-class pairs are the ground truth.
fn validation_score(members: &[Vec<Member>], split: &[usize], w: &[f64]) -> f64 {
    let named: Vec<(String, usize, Vec<f64>)> = split
        .iter()
        .flat_map(|&c| {
            members[c]
                .iter()
                .enumerate()
                .map(move |(i, m)| (format!("c{c}_m{i}"), m.class, project(w, &m.vector).0))
        })
        .collect();
    let mut gt = GroundTruth::new();
    let mut list = MatchList::new("validation", "validation", named.len());
    for (i, (name, class, v)) in named.iter().enumerate() {
        let mut cands: Vec<MatchCandidate> = named
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, (t, tc, tv))| {
                if tc == class {
                    gt.insert(name.clone(), t.clone());
                }
                MatchCandidate { source: name.clone(), target: t.clone(), score: dot(v, tv), rank: 0 }
            })
            .collect();
        cands.sort_by(candidate_order);
        list.set(name.clone(), cands);
    }
    if gt.is_empty() {
        return 0.0;
    }
    let recall = recall_at_gt(&list, &gt).expect("ground truth is non-empty");
    (mrr(&list, &gt) + recall) / 2.0
}

/// Mining-category counts over a batch's hardest triplets, for diagnostics.
pub fn mining_histogram(batch: &TripletBatch, margin: f64) -> Vec<(MiningCategory, usize)> {
    let hard = batch_hard_loss(batch, margin);
    let cats = [
        MiningCategory::HardPositivePair,
        MiningCategory::HardestNegative,
        MiningCategory::SemiHardNegative,
        MiningCategory::Easy,
    ];
    let found: Vec<MiningCategory> = hard
        .hardest
        .iter()
        .enumerate()
        .filter_map(|(a, h)| h.map(|(p, n)| mine_category(a, p, n, batch, margin)))
        .collect();
    let present: HashSet<MiningCategory> = found.iter().copied().collect();
    cats.into_iter()
        .filter(|c| present.contains(c))
        .map(|c| (c, found.iter().filter(|&&f| f == c).count()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{ClassMember, Origin};
    use crate::embedding::HashEmbedder;
    use proptest::prelude::*;
    use rand::Rng;

    fn batch(vectors: &[&[f64]], labels: &[usize]) -> TripletBatch {
        TripletBatch { vectors: vectors.iter().map(|v| v.to_vec()).collect(), labels: labels.to_vec() }
    }

    #[test]
    fn distances() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]), 2.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    }

    #[test]
    fn collapsed_batch_costs_margin_per_anchor() {
        let b = batch(&[&[1.0, 0.0][..]; 6], &[0, 0, 1, 1, 2, 2]);
        assert!((batch_hard_loss(&b, 0.5).loss - 6.0 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn separated_batch_with_zero_margin() {
        let b = batch(&[&[1.0, 0.0], &[0.99, 0.14], &[0.0, 1.0], &[0.14, 0.99]], &[0, 0, 1, 1]);
        assert_eq!(batch_hard_loss(&b, 0.0).loss, 0.0);
    }

    #[test]
    fn two_by_two_example() {
        let b = batch(&[&[1.0, 0.0], &[0.8, 0.6], &[0.0, 1.0], &[-0.6, 0.8]], &[0, 0, 1, 1]);
        let d = |i: usize, j: usize| cosine_distance(&b.vectors[i], &b.vectors[j]);
        // each anchor has one positive; brute force the nearest negative
        let mut expected = 0.0;
        for (a, p, negs) in [(0, 1, [2, 3]), (1, 0, [2, 3]), (2, 3, [0, 1]), (3, 2, [0, 1])] {
            let dn = negs.iter().map(|&n| d(a, n)).fold(f64::INFINITY, f64::min);
            expected += (0.5 + d(a, p) - dn).max(0.0);
        }
        let got = batch_hard_loss(&b, 0.5);
        assert!((got.loss - expected).abs() < 1e-12);
        assert_eq!(got.hardest[0], Some((1, 2)));
        assert_eq!(got.hardest[1], Some((0, 2)));
    }

    #[test]
    fn mining_categories() {
        // a=0, p=1, n=2 with D(a,p)=0.2, and a second negative farther away
        let unit = |d: f64| {
            let c: f64 = 1.0 - d;
            vec![c, (1.0 - c * c).sqrt()]
        };
        let mk = |dp: f64, dn: f64| TripletBatch {
            vectors: vec![vec![1.0, 0.0], unit(dp), unit(dn), vec![-1.0, 0.0]],
            labels: vec![0, 0, 1, 1],
        };
        assert_eq!(mine_category(0, 1, 2, &mk(0.2, 0.5), 0.5), MiningCategory::SemiHardNegative);
        assert_eq!(mine_category(0, 1, 2, &mk(0.2, 0.9), 0.5), MiningCategory::HardestNegative);
        assert_eq!(mine_category(0, 1, 2, &mk(0.5, 0.3), 0.5), MiningCategory::Easy);
        assert_eq!(mine_category(0, 1, 3, &mk(0.2, 0.5), 0.5), MiningCategory::HardPositivePair);
        assert!(!mining_histogram(&mk(0.2, 0.5), 0.5).is_empty());
    }

    #[test]
    fn identity_gradient_reproduces_raw_loss() {
        let b = batch(&[&[1.0, 0.0], &[0.8, 0.6], &[0.0, 1.0], &[-0.6, 0.8]], &[0, 0, 1, 1]);
        let (loss, _) = loss_gradient(&b, 0.5, &identity(2));
        assert!((loss - batch_hard_loss(&b, 0.5).loss).abs() < 1e-12);
    }

    #[test]
    fn inactive_terms_give_zero_gradient() {
        let b = batch(&[&[1.0, 0.0], &[1.0, 0.01], &[-1.0, 0.0], &[-1.0, 0.01]], &[0, 0, 1, 1]);
        let (loss, grad) = loss_gradient(&b, 0.1, &identity(2));
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 4;
        let vectors: Vec<Vec<f64>> = (0..4).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b = TripletBatch { vectors, labels: vec![0, 0, 1, 1] };
        let w: Vec<f64> = (0..dim * dim)
            .map(|i| if i % (dim + 1) == 0 { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3))
            .collect();
        let (_, grad) = loss_gradient(&b, 1.5, &w);
        let f = |w: &[f64]| {
            let projected = TripletBatch { vectors: b.vectors.iter().map(|v| project(w, v).0).collect(), labels: b.labels.clone() };
            batch_hard_loss(&projected, 1.5).loss
        };
        let h = 1e-5;
        for i in 0..w.len() {
            let mut up = w.clone();
            let mut down = w.clone();
            up[i] += h;
            down[i] -= h;
            let numeric = (f(&up) - f(&down)) / (2.0 * h);
            assert!((numeric - grad[i]).abs() <= 1e-6 + 1e-4 * grad[i].abs(), "{i}: {numeric} vs {}", grad[i]);
        }
    }

    #[test]
    fn head_round_trip_and_apply() {
        let mut head = ProjectionHead::identity(3);
        head.weights[1] = 0.5;
        head.seed = 9;
        head.score = 0.75;
        head.trained = true;
        let back = ProjectionHead::decode(&head.encode()).unwrap();
        assert_eq!(back, head);
        let v = EmbeddingVector::from_raw(&[1.0, 0.0, 0.0]);
        assert_eq!(ProjectionHead::identity(3).apply(&v).unwrap(), v);
        let zero = ProjectionHead { weights: vec![0.0; 9], ..ProjectionHead::identity(3) };
        assert_eq!(zero.apply(&v).unwrap(), v);
        assert!(head.apply(&EmbeddingVector::from_raw(&[1.0, 0.0])).is_err());
        let bytes = head.encode();
        assert!(ProjectionHead::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(ProjectionHead::decode(b"COLHEAD1").is_err());
    }

    fn synthetic_classes(n: usize, seed: u64) -> Vec<TrainingClass> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let word = |rng: &mut ChaCha8Rng, len: usize| -> String {
            (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect()
        };
        (0..n)
            .map(|class_id| {
                let name = word(&mut rng, 8);
                let values: Vec<String> = (0..12).map(|_| word(&mut rng, 5)).collect();
                let mut members = vec![ClassMember { name: name.clone(), values: values.clone(), origin: Origin::Anchor }];
                for (n, v) in crate::augment::structural_variants(&name, &values, 3, seed + class_id as u64) {
                    members.push(ClassMember { name: n, values: v, origin: Origin::Structural });
                }
                TrainingClass { class_id, members }
            })
            .collect()
    }

    fn small_embedder() -> Embedder {
        Embedder::new(Box::new(HashEmbedder::new(32)), 32)
    }

    #[test]
    fn needs_four_classes() {
        let classes = synthetic_classes(3, 1);
        assert!(matches!(train(&classes, &small_embedder(), &TrainConfig::default()), Err(Error::TooFewClasses(3))));
    }

    #[test]
    fn zero_learning_rate_keeps_identity() {
        let classes = synthetic_classes(6, 2);
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 10, ..TrainConfig::default() };
        let (head, report) = train(&classes, &small_embedder(), &cfg).unwrap();
        assert_eq!(head.weights, ProjectionHead::identity(32).weights);
        assert_eq!(report.best_score, report.identity_score);
        assert_eq!(report.epoch_scores.len(), PATIENCE);
    }

    #[test]
    fn training_is_deterministic_and_never_worse() {
        let classes = synthetic_classes(8, 4);
        let cfg = TrainConfig { epochs: 6, ..TrainConfig::default() };
        let (a, ra) = train(&classes, &small_embedder(), &cfg).unwrap();
        let (b, _) = train(&classes, &small_embedder(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(ra.best_score >= ra.identity_score);
        for s in &ra.epoch_scores {
            assert!(ra.best_score >= *s);
        }
    }

    proptest! {
        #[test]
        fn loss_is_non_negative_and_zero_means_separated(
            raw in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 6),
            margin in 0.0f64..1.0,
        ) {
            let b = TripletBatch { vectors: raw, labels: vec![0, 0, 1, 1, 2, 2] };
            let out = batch_hard_loss(&b, margin);
            prop_assert!(out.loss >= 0.0);
            if out.loss == 0.0 {
                for (a, h) in out.hardest.iter().enumerate() {
                    let (p, n) = h.unwrap();
                    let d = |j: usize| cosine_distance(&b.vectors[a], &b.vectors[j]);
                    prop_assert!(d(p) + margin <= d(n) + 1e-12);
                }
            }
        }

        #[test]
        fn projection_is_unit_or_passthrough(
            v in proptest::collection::vec(-1.0f64..1.0, 4),
            w in proptest::collection::vec(-1.0f64..1.0, 16),
        ) {
            let (e, norm) = project(&w, &v);
            if norm == 0.0 {
                prop_assert_eq!(e, v);
            } else {
                prop_assert!((dot(&e, &e) - 1.0).abs() < 1e-12);
            }
        }
    }
}
