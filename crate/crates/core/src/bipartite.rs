//! Bipartite reranking: a maximum-weight one-to-one assignment between source
//! and target columns decides which candidates go to the top.

use std::collections::HashSet;

use indexmap::IndexSet;

use crate::retrieval::{MatchCandidate, MatchList};

/// Gap kept between the weakest assigned edge and the strongest leftover.
pub const RESCALE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, column, weight)`, ascending by row.
    pub edges: Vec<(usize, usize, f64)>,
    pub total: f64,
}

/// Maximum-weight matching over the present entries of a rectangular matrix.
///
/// Rows and columns may stay unmatched, so only strictly positive entries are
/// ever selected. Solved exactly with the shortest-augmenting-path Hungarian
/// method on the square padding of `-max(w, 0)`, `O(n^3)` for `n = max(rows,
/// cols)`.
pub fn solve_assignment(weights: &[Vec<Option<f64>>]) -> Assignment {
    let rows = weights.len();
    let cols = weights.iter().map(Vec::len).max().unwrap_or(0);
    let n = rows.max(cols);
    if n == 0 {
        return Assignment { edges: Vec::new(), total: 0.0 };
    }
    let gain = |i: usize, j: usize| -> f64 {
        match weights.get(i).and_then(|r| r.get(j)).copied().flatten() {
            Some(w) if w.is_finite() && w > 0.0 => w,
            _ => 0.0,
        }
    };

    // 1-based potentials; column 0 is the virtual root of each search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = -gain(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut edges: Vec<(usize, usize, f64)> = (1..=n)
        .filter_map(|j| {
            let (i, j) = (row_of[j] - 1, j - 1);
            let w = gain(i, j);
            (w > 0.0).then_some((i, j, w))
        })
        .collect();
    edges.sort_by_key(|&(i, j, _)| (i, j));
    let total = edges.iter().map(|e| e.2).sum();
    Assignment { edges, total }
}

/// Promotes the assigned pair of each source to the top of its list and
/// rescales every other candidate below the weakest assigned score.
pub fn rerank_bipartite(list: MatchList) -> MatchList {
    let n_sources = list.sources().count();
    let targets: IndexSet<&str> = list.candidates().map(|c| c.target.as_str()).collect();
    let mut weights = vec![vec![None; targets.len()]; n_sources];
    for (i, (_, cands)) in list.per_source().enumerate() {
        for c in cands {
            let j = targets.get_index_of(c.target.as_str()).expect("collected above");
            weights[i][j] = Some(c.score);
        }
    }
    let assignment = solve_assignment(&weights);
    if assignment.edges.is_empty() {
        return list;
    }
    let assigned: HashSet<(usize, usize)> = assignment.edges.iter().map(|&(i, j, _)| (i, j)).collect();
    let w_low = assignment.edges.iter().map(|e| e.2).fold(f64::INFINITY, f64::min);
    let is_assigned = |i: usize, c: &MatchCandidate| {
        let j = targets.get_index_of(c.target.as_str()).expect("collected above");
        assigned.contains(&(i, j))
    };
    let max_non = list
        .per_source()
        .enumerate()
        .flat_map(|(i, (_, cands))| cands.iter().filter(move |c| !is_assigned(i, c)))
        .map(|c| c.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let rescale = leftover_rescale(w_low, max_non);

    let mut out = MatchList::new(list.source_table.clone(), list.target_table.clone(), list.k);
    for (i, (source, cands)) in list.per_source().enumerate() {
        let mut keyed: Vec<(bool, usize, MatchCandidate)> = cands
            .iter()
            .enumerate()
            .map(|(pos, c)| {
                let a = is_assigned(i, c);
                let mut c = c.clone();
                if !a {
                    c.score = rescale(c.score);
                }
                (a, pos, c)
            })
            .collect();
        // new score desc, assigned first, then the incoming (already
        // name-tie-broken) order
        keyed.sort_by(|x, y| {
            y.2.score
                .total_cmp(&x.2.score)
                .then_with(|| y.0.cmp(&x.0))
                .then_with(|| x.1.cmp(&y.1))
        });
        out.set(source, keyed.into_iter().map(|k| k.2).collect());
    }
    out
}

/// Order-preserving map putting every leftover score strictly below `w_low`.
fn leftover_rescale(w_low: f64, max_non: f64) -> impl Fn(f64) -> f64 {
    let target = w_low - RESCALE_EPSILON;
    let (factor, shift) = if !max_non.is_finite() || max_non < w_low {
        (1.0, 0.0)
    } else if target > 0.0 {
        (target / max_non, 0.0)
    } else {
        // the weakest assigned score is within epsilon of zero; a factor
        // would be non-positive and flip the order, so shift instead
        (1.0, max_non - target)
    };
    move |s| s * factor - shift
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Vec<Vec<Option<f64>>> {
        rows.iter().map(|r| r.iter().map(|&x| Some(x)).collect()).collect()
    }

    fn pairs(a: &Assignment) -> Vec<(usize, usize)> {
        a.edges.iter().map(|&(i, j, _)| (i, j)).collect()
    }

    fn cand(s: &str, t: &str, score: f64) -> MatchCandidate {
        MatchCandidate { source: s.into(), target: t.into(), score, rank: 0 }
    }

    fn order(list: &MatchList, s: &str) -> Vec<String> {
        list.get(s).unwrap().iter().map(|c| c.target.clone()).collect()
    }

    #[test]
    fn small_matrices() {
        let a = solve_assignment(&m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(pairs(&a), [(0, 0), (1, 1)]);
        assert_eq!(a.total, 2.0);

        let a = solve_assignment(&m(&[&[0.9, 0.8], &[0.7, 0.1]]));
        assert_eq!(pairs(&a), [(0, 1), (1, 0)]);
        assert!((a.total - 1.5).abs() < 1e-15);

        let a = solve_assignment(&m(&[&[0.2, 0.9]]));
        assert_eq!(pairs(&a), [(0, 1)]);
        assert_eq!(a.total, 0.9);
    }

    #[test]
    fn missing_and_negative_entries_are_unassignable() {
        let w = vec![vec![None, Some(0.5)], vec![Some(-0.3), None]];
        let a = solve_assignment(&w);
        assert_eq!(pairs(&a), [(0, 1)]);
        assert!(solve_assignment(&[]).edges.is_empty());
        assert!(solve_assignment(&[vec![None, None]]).edges.is_empty());
    }

    #[test]
    fn worked_two_source_example() {
        let mut list = MatchList::new("S", "T", 2);
        list.set("a", vec![cand("a", "x", 0.9), cand("a", "y", 0.8)]);
        list.set("b", vec![cand("b", "x", 0.85), cand("b", "y", 0.2)]);
        let out = rerank_bipartite(list);
        assert_eq!(order(&out, "a"), ["y", "x"]);
        assert_eq!(order(&out, "b"), ["x", "y"]);
        let a = out.get("a").unwrap();
        assert_eq!(a[0].score, 0.8);
        assert!(a[1].score < 0.8);
        assert_eq!(a.iter().map(|c| c.rank).collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn mutually_best_lists_unchanged() {
        let mut list = MatchList::new("S", "T", 2);
        list.set("a", vec![cand("a", "x", 0.9), cand("a", "y", 0.1)]);
        list.set("b", vec![cand("b", "y", 0.8), cand("b", "x", 0.2)]);
        let out = rerank_bipartite(list.clone());
        assert_eq!(out, list);
    }

    #[test]
    fn single_candidate_unchanged() {
        let mut list = MatchList::new("S", "T", 1);
        list.set("a", vec![cand("a", "x", 0.4)]);
        assert_eq!(rerank_bipartite(list.clone()), list);
    }

    #[test]
    fn near_zero_assigned_score_still_orders_leftovers_below() {
        let f = leftover_rescale(1e-10, 0.5);
        assert!(f(0.5) < 1e-10);
        assert!(f(0.4) < f(0.5));
        let g = leftover_rescale(0.8, 0.9);
        assert!((g(0.9) - (0.8 - RESCALE_EPSILON)).abs() < 1e-15);
    }
}
