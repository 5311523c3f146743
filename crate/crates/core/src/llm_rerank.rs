//! LLM reranking: each source column and its top candidates go to a chat
//! model that scores every candidate in `[0, 1]`; the scores replace the
//! embedding scores for the candidates it names.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::llm::{ChatClient, LlmConfig, MAX_ATTEMPTS};
use crate::retrieval::{MatchCandidate, MatchList};
use crate::serialize::SerializedColumn;
use crate::table::ColumnType;

/// Gap guarding the leftover rescale factor against division by zero.
pub const LEFTOVER_EPSILON: f64 = 1e-9;

const INSTRUCTION: &str = "From a score of 0.00 to 1.00, judge the similarity of the candidate column in the source table to each target column in the target table. Each column is represented by its name and a sample of its respective values, if available.";

const EXAMPLE: &str = "Example:
Candidate Column:
Column: EmpID, Sample values: [100, 101, 102]
Target Columns:
Column: WorkerID, Sample values: [100, 101, 102]
Column: EmpCode, Sample values: [00A, 00B, 00C]
Column: StaffName, Sample values: [\"Alice\", \"Bob\", \"Charlie\"]
Response: WorkerID(0.95); EmpCode(0.30); StaffName(0.05)";

const FORMAT: &str = "Provide the name of each target column followed by its similarity score in parentheses, formatted to two decimals, and separated by semicolons. Rank the column-score pairs in descending order. Exclude additional information and quotations.";

/// Builds the scoring prompt: instruction, one-shot example, format and
/// input blocks separated by blank lines.
pub fn build_prompt(source: &SerializedColumn, candidates: &[SerializedColumn]) -> String {
    let mut out = String::with_capacity(1024 + 64 * candidates.len());
    out.push_str(INSTRUCTION);
    out.push_str("\n\n");
    out.push_str(EXAMPLE);
    out.push_str("\n\n");
    out.push_str(FORMAT);
    out.push_str("\n\nSource Column:\n");
    out.push_str(&source.prompt_line());
    out.push_str("\nTarget Columns:\n");
    for c in candidates {
        out.push_str(&c.prompt_line());
        out.push('\n');
    }
    out.push_str("Response:");
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unparseable LLM response: {0}")]
pub struct ParseError(pub String);

/// Parses `name(score); name(score); ...`, returning entries by descending
/// score (ties keep response order) with scores clamped to `[0, 1]`.
pub fn parse_response(text: &str) -> std::result::Result<Vec<(String, f64)>, ParseError> {
    let body = text.trim();
    let body = body.strip_suffix(';').unwrap_or(body);
    if body.trim().is_empty() {
        return Err(ParseError("empty response".into()));
    }
    let mut out = Vec::new();
    for entry in body.split(';') {
        out.push(parse_entry(entry).ok_or_else(|| ParseError(format!("bad entry {:?}", entry.trim())))?);
    }
    out.sort_by(|a: &(String, f64), b| b.1.total_cmp(&a.1));
    Ok(out)
}

fn parse_entry(entry: &str) -> Option<(String, f64)> {
    let entry = entry.trim();
    let open = entry.find('(')?;
    let name = entry[..open].trim();
    let inner = entry[open + 1..].strip_suffix(')')?;
    if name.is_empty() {
        return None;
    }
    Some((name.to_string(), parse_score(inner.trim())?))
}

fn parse_score(s: &str) -> Option<f64> {
    let digits = s.strip_prefix(['-', '+']).unwrap_or(s);
    let (int, frac) = match digits.split_once('.') {
        Some((i, f)) => (i, f),
        None => (digits, ""),
    };
    let ok = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    if int.is_empty() || !ok(int) || !ok(frac) || frac.len() > 2 || (digits.contains('.') && frac.is_empty()) {
        return None;
    }
    let v: f64 = s.parse().ok()?;
    Some(v.clamp(0.0, 1.0))
}

/// Re-scores the top `config.top_k` candidates of every source column.
///
/// `sources` and `targets` supply the prompt renderings; a column missing
/// from them is rendered by name alone. Columns whose responses fail to
/// parse [`MAX_ATTEMPTS`] times keep their embedding scores.
pub fn rerank_llm(
    list: &MatchList,
    sources: &[SerializedColumn],
    targets: &[SerializedColumn],
    client: &dyn ChatClient,
    config: &LlmConfig,
) -> Result<MatchList> {
    config.validate()?;
    let by_source: HashMap<&str, &SerializedColumn> = sources.iter().map(|c| (c.name.as_str(), c)).collect();
    let by_target: HashMap<&str, &SerializedColumn> = targets.iter().map(|c| (c.name.as_str(), c)).collect();
    let lookup = |m: &HashMap<&str, &SerializedColumn>, name: &str| {
        m.get(name).map(|c| (*c).clone()).unwrap_or_else(|| SerializedColumn {
            name: name.to_string(),
            type_label: ColumnType::Unknown,
            sample: Vec::new(),
        })
    };

    let work: Vec<(&str, &[MatchCandidate])> = list.per_source().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.max_concurrent)
        .build()
        .map_err(|e| Error::Config(format!("llm worker pool: {e}")))?;
    let results: Vec<(Vec<MatchCandidate>, usize, bool)> = pool.install(|| {
        work.par_iter()
            .map(|&(source, cands)| {
                let n_send = config.top_k.min(cands.len());
                if n_send == 0 {
                    return (cands.to_vec(), 0, true);
                }
                let sent: Vec<SerializedColumn> =
                    cands[..n_send].iter().map(|c| lookup(&by_target, &c.target)).collect();
                let prompt = build_prompt(&lookup(&by_source, source), &sent);
                let tokens = prompt.len().div_ceil(4);
                match score_with_retries(client, &prompt, &cands[..n_send]) {
                    Some(scores) => (apply_scores(cands, &scores), tokens, true),
                    None => {
                        log::warn!("llm rerank of {source:?} fell back to embedding scores after {MAX_ATTEMPTS} attempts");
                        (cands.to_vec(), tokens, false)
                    }
                }
            })
            .collect()
    });

    let tokens: usize = results.iter().map(|r| r.1).sum();
    let fallbacks = results.iter().filter(|r| !r.2).count();
    log::info!(
        "llm rerank: {} source columns, ~{tokens} prompt tokens, {fallbacks} fallbacks",
        work.len()
    );
    let mut out = MatchList::new(list.source_table.clone(), list.target_table.clone(), list.k);
    for ((source, _), (cands, _, _)) in work.iter().zip(results) {
        out.set(*source, cands);
    }
    Ok(out)
}

/// LLM score per sent candidate index; `None` once attempts are exhausted.
fn score_with_retries(client: &dyn ChatClient, prompt: &str, sent: &[MatchCandidate]) -> Option<HashMap<usize, f64>> {
    for attempt in 1..=MAX_ATTEMPTS {
        let outcome = client
            .complete(prompt)
            .map_err(|e| e.to_string())
            .and_then(|text| parse_response(&text).map_err(|e| e.to_string()));
        match outcome {
            Ok(entries) => {
                let mut scores = HashMap::new();
                // entries are score-descending, so a repeated name keeps its
                // highest score
                for (name, score) in entries {
                    if let Some(i) = sent.iter().position(|c| c.target.trim() == name) {
                        scores.entry(i).or_insert(score);
                    }
                }
                if !scores.is_empty() {
                    return Some(scores);
                }
                log::debug!("llm attempt {attempt}: response names no sent candidate");
            }
            Err(e) => log::debug!("llm attempt {attempt}: {e}"),
        }
    }
    None
}

/// Replaces scores for the LLM-scored positions and squeezes every other
/// candidate under the lowest LLM score.
fn apply_scores(cands: &[MatchCandidate], scores: &HashMap<usize, f64>) -> Vec<MatchCandidate> {
    let s_min = scores.values().copied().fold(f64::INFINITY, f64::min);
    let max_leftover = cands
        .iter()
        .enumerate()
        .filter(|(i, _)| !scores.contains_key(i))
        .map(|(_, c)| c.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let g = leftover_factor(s_min, max_leftover);
    let mut keyed: Vec<(bool, usize, MatchCandidate)> = cands
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut c = c.clone();
            match scores.get(&i) {
                Some(&s) => c.score = s,
                None => c.score *= g,
            }
            (scores.contains_key(&i), i, c)
        })
        .collect();
    keyed.sort_by(|x, y| {
        y.2.score
            .total_cmp(&x.2.score)
            .then_with(|| y.0.cmp(&x.0))
            .then_with(|| x.1.cmp(&y.1))
    });
    keyed.into_iter().map(|k| k.2).collect()
}

/// `s_min / (max_leftover + eps)` when some leftover reaches `s_min`, else 1.
pub fn leftover_factor(s_min: f64, max_leftover: f64) -> f64 {
    if max_leftover.is_finite() && max_leftover >= s_min {
        s_min / (max_leftover + LEFTOVER_EPSILON)
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatError;

    fn col(name: &str, sample: &[&str]) -> SerializedColumn {
        SerializedColumn {
            name: name.into(),
            type_label: ColumnType::Categorical,
            sample: sample.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn cand(t: &str, score: f64) -> MatchCandidate {
        MatchCandidate { source: "s".into(), target: t.into(), score, rank: 0 }
    }

    struct Fixed(&'static str);
    impl ChatClient for Fixed {
        fn complete(&self, _: &str) -> std::result::Result<String, ChatError> {
            Ok(self.0.to_string())
        }
    }

    #[test]
    fn prompt_layout() {
        let p = build_prompt(&col("a", &["1", "2"]), &[col("x", &[]), col("y", &["q"])]);
        assert!(p.starts_with("From a score of 0.00 to 1.00, judge the similarity"));
        assert!(p.contains("Response: WorkerID(0.95); EmpCode(0.30); StaffName(0.05)\n\nProvide the name"));
        assert!(p.ends_with(
            "Source Column:\nColumn: a, Sample values: [1, 2]\nTarget Columns:\n\
             Column: x, Sample values: []\nColumn: y, Sample values: [q]\nResponse:"
        ));
        let one = build_prompt(&col("a", &[]), &[col("x", &[])]);
        let input = one.split("Source Column:").nth(1).unwrap();
        assert_eq!(input.matches("Column: ").count(), 2);
    }

    #[test]
    fn parses_figure_response() {
        let r = parse_response("WorkerID(0.95); EmpCode(0.30); StaffName(0.05)").unwrap();
        assert_eq!(
            r,
            vec![("WorkerID".into(), 0.95), ("EmpCode".into(), 0.30), ("StaffName".into(), 0.05)]
        );
    }

    #[test]
    fn parse_resorts_and_clamps() {
        let r = parse_response("A(0.2); B(0.9)").unwrap();
        assert_eq!(r, vec![("B".into(), 0.9), ("A".into(), 0.2)]);
        let r = parse_response(" A (1.5);B(-0.1); C(0.5);\n").unwrap();
        assert_eq!(r, vec![("A".into(), 1.0), ("C".into(), 0.5), ("B".into(), 0.0)]);
        let r = parse_response("x(1);y(0.5)").unwrap();
        assert_eq!(r[0], ("x".into(), 1.0));
    }

    #[test]
    fn parse_failures() {
        for bad in ["", "  ", "garbage", "A(0.955)", "A(x)", "(0.5)", "A(0.5) extra", "A(0.5);;B(0.1)", "A(.5)", "A(1.)"] {
            assert!(parse_response(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn leftover_arithmetic() {
        let g = leftover_factor(0.4, 0.8);
        assert!((0.8 * g - 0.4).abs() < 1e-8);
        assert!((0.4 * g - 0.2).abs() < 1e-8);
        assert_eq!(leftover_factor(0.5, 0.3), 1.0);
    }

    #[test]
    fn omitted_and_unsent_candidates_are_rescaled() {
        let mut list = MatchList::new("S", "T", 4);
        list.set("s", vec![cand("a", 0.9), cand("b", 0.8), cand("c", 0.4), cand("d", 0.1)]);
        let cfg = LlmConfig { top_k: 2, ..LlmConfig::default() };
        let out = rerank_llm(&list, &[], &[], &Fixed("a(0.4); zz(0.9)"), &cfg).unwrap();
        let got: Vec<(&str, f64)> = out.get("s").unwrap().iter().map(|c| (c.target.as_str(), c.score)).collect();
        assert_eq!(got[0], ("a", 0.4));
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), ["a", "b", "c", "d"]);
        assert!((got[1].1 - 0.4).abs() < 1e-8 && got[1].1 < 0.4);
        assert!((got[2].1 - 0.2).abs() < 1e-8);
    }

    #[test]
    fn failing_client_falls_back() {
        struct Down;
        impl ChatClient for Down {
            fn complete(&self, _: &str) -> std::result::Result<String, ChatError> {
                Err(ChatError("down".into()))
            }
        }
        let mut list = MatchList::new("S", "T", 2);
        list.set("s", vec![cand("a", 0.9), cand("b", 0.8)]);
        assert_eq!(rerank_llm(&list, &[], &[], &Down, &LlmConfig::default()).unwrap(), list);
        assert_eq!(rerank_llm(&list, &[], &[], &Fixed("unknown(0.9)"), &LlmConfig::default()).unwrap(), list);
    }
}
