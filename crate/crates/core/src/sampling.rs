//! Selection of representative distinct values per column.
//!
//! Priority sampling is the default: each distinct value `v` gets the rank
//! `freq(v) / h(v)` where `h` is a seeded hash onto `(0, 1]`, and the `m`
//! largest ranks win. Because `h` only depends on the seed and the value,
//! columns sharing values tend to select the same ones.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::fnv1a64_seeded;
use crate::table::Column;

pub const DEFAULT_SAMPLE_SIZE: usize = 10;

const TWO_POW_53: u64 = 1 << 53;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Priority,
    Coordinated,
    Weighted,
    Frequency,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Priority,
        Strategy::Coordinated,
        Strategy::Weighted,
        Strategy::Frequency,
        Strategy::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Priority => "priority",
            Strategy::Coordinated => "coordinated",
            Strategy::Weighted => "weighted",
            Strategy::Frequency => "frequency",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampling strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: Strategy::Priority,
            sample_size: DEFAULT_SAMPLE_SIZE,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size == 0 {
            return Err(Error::Config("sample size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Maps `(seed, value)` onto `(0, 1]` as `(H mod 2^53 + 1) / 2^53`.
pub fn hash_unit(seed: u64, value: &str) -> f64 {
    let h = fnv1a64_seeded(seed, value.as_bytes());
    ((h % TWO_POW_53) + 1) as f64 / TWO_POW_53 as f64
}

/// Distinct non-missing values with their occurrence counts, in byte order.
pub fn value_frequencies<'a>(values: impl IntoIterator<Item = &'a str>) -> BTreeMap<&'a str, u64> {
    let mut freq = BTreeMap::new();
    for v in values {
        *freq.entry(v).or_insert(0) += 1;
    }
    freq
}

pub fn sample_values(column: &Column, config: &SamplerConfig) -> Vec<String> {
    sample_from(column.non_missing(), config)
}

/// Samples from a plain list of non-missing values.
pub fn sample_from<'a>(values: impl IntoIterator<Item = &'a str>, config: &SamplerConfig) -> Vec<String> {
    let freq = value_frequencies(values);
    let m = config.sample_size.max(1);
    let picked: Vec<&str> = match config.strategy {
        Strategy::Priority => top_by_rank(&freq, m, |v, f| f as f64 / hash_unit(config.seed, v)),
        Strategy::Coordinated => top_by_rank(&freq, m, |v, _| 1.0 / hash_unit(config.seed, v)),
        Strategy::Frequency => top_by_rank(&freq, m, |_, f| f as f64),
        Strategy::Weighted => weighted_without_replacement(&freq, m, config.seed),
        Strategy::Random => uniform_without_replacement(&freq, m, config.seed),
    };
    picked.into_iter().map(str::to_string).collect()
}

/// The `m` values with the largest rank; ties go to the smaller value.
pub fn top_by_rank<'a>(
    freq: &BTreeMap<&'a str, u64>,
    m: usize,
    rank: impl Fn(&str, u64) -> f64,
) -> Vec<&'a str> {
    let mut ranked: Vec<(f64, &str)> = freq.iter().map(|(&v, &f)| (rank(v, f), v)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    ranked.into_iter().take(m).map(|(_, v)| v).collect()
}

fn weighted_without_replacement<'a>(freq: &BTreeMap<&'a str, u64>, m: usize, seed: u64) -> Vec<&'a str> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<(&str, u64)> = freq.iter().map(|(&v, &f)| (v, f)).collect();
    let mut total: u64 = pool.iter().map(|(_, f)| f).sum();
    let mut out = Vec::with_capacity(m.min(pool.len()));
    while out.len() < m && !pool.is_empty() {
        let mut r = rng.random_range(0..total);
        let idx = pool
            .iter()
            .position(|&(_, f)| {
                if r < f {
                    true
                } else {
                    r -= f;
                    false
                }
            })
            .expect("draw falls inside the remaining mass");
        let (v, f) = pool.remove(idx);
        total -= f;
        out.push(v);
    }
    out
}

fn uniform_without_replacement<'a>(freq: &BTreeMap<&'a str, u64>, m: usize, seed: u64) -> Vec<&'a str> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<&str> = freq.keys().copied().collect();
    let amount = m.min(pool.len());
    rand::seq::index::sample(&mut rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn cfg(strategy: Strategy, m: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            strategy,
            sample_size: m,
            seed,
        }
    }

    #[test]
    fn hash_unit_is_deterministic_and_in_range() {
        assert_eq!(hash_unit(3, "abc"), hash_unit(3, "abc"));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let seed: u64 = rng.random();
            let v = format!("{}", rng.random::<u32>());
            let h = hash_unit(seed, &v);
            assert!(h > 0.0 && h <= 1.0, "{h}");
        }
    }

    #[test]
    fn seed_changes_hash() {
        let changed = (0..10_000)
            .filter(|i| {
                let v = format!("value-{i}");
                hash_unit(1, &v) != hash_unit(2, &v)
            })
            .count();
        assert!(changed >= 9_900, "{changed}");
    }

    #[test]
    fn fewer_distinct_than_m_returns_all() {
        let col = Column::from_cells("c", ["x", "y", "z", "x"]);
        for s in Strategy::ALL {
            let mut got = sample_values(&col, &cfg(s, 10, 4));
            got.sort();
            assert_eq!(got, ["x", "y", "z"], "{s}");
        }
    }

    #[test]
    fn priority_rank_with_fixed_hash() {
        // h = {a: 0.5, b: 0.25, c: 1.0}, freq = {a: 2, b: 1, c: 3}
        // R = {a: 4.0, b: 4.0, c: 3.0}
        let freq: BTreeMap<&str, u64> = [("a", 2), ("b", 1), ("c", 3)].into_iter().collect();
        let h = |v: &str| match v {
            "a" => 0.5,
            "b" => 0.25,
            _ => 1.0,
        };
        let got = top_by_rank(&freq, 2, |v, f| f as f64 / h(v));
        assert_eq!(got, ["a", "b"]);
    }

    #[test]
    fn frequency_strategy_prefers_common_values() {
        let col = Column::from_cells("c", ["b", "a", "a", "c", "c", "c", "d"]);
        assert_eq!(sample_values(&col, &cfg(Strategy::Frequency, 2, 0)), ["c", "a"]);
    }

    #[test]
    fn missing_cells_are_ignored() {
        let col = Column::from_cells("c", ["", "NA", "x"]);
        assert_eq!(sample_values(&col, &SamplerConfig::default()), ["x"]);
        let empty = Column::from_cells("c", Vec::<String>::new());
        assert!(sample_values(&empty, &SamplerConfig::default()).is_empty());
    }

    #[test]
    fn identical_multisets_coordinate() {
        let a = Column::from_cells("a", (0..200).map(|i| format!("v{}", i % 37)));
        let b = Column::from_cells("b", (0..200).rev().map(|i| format!("v{}", i % 37)));
        for s in [Strategy::Priority, Strategy::Coordinated] {
            let c = cfg(s, 10, 99);
            assert_eq!(sample_values(&a, &c), sample_values(&b, &c));
        }
    }

    proptest::proptest! {
        #[test]
        fn samples_are_distinct_bounded_and_deterministic(
            cells in proptest::collection::vec("[a-f]{0,2}", 0..60),
            m in 1usize..8,
            seed in proptest::prelude::any::<u64>(),
            si in 0usize..5,
        ) {
            let col = Column::from_cells("c", cells);
            let c = cfg(Strategy::ALL[si], m, seed);
            let got = sample_values(&col, &c);
            proptest::prop_assert!(got.len() <= m);
            let distinct: HashSet<&String> = got.iter().collect();
            proptest::prop_assert_eq!(distinct.len(), got.len());
            let present: HashSet<&str> = col.non_missing().collect();
            proptest::prop_assert!(got.iter().all(|v| present.contains(v.as_str())));
            proptest::prop_assert_eq!(got.len(), m.min(present.len()));
            proptest::prop_assert_eq!(got, sample_values(&col, &c));
        }
    }
}
