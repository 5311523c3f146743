//! Training classes for fine-tuning.
//!
//! Each target column becomes one class: the column itself (the anchor),
//! locally perturbed copies, and renamed/re-valued variants proposed by an
//! LLM. Members of a class are mutual positives; everything else is negative.

use std::fmt;

use indexmap::IndexSet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::mix64;
use crate::llm::{ChatClient, MAX_ATTEMPTS};
use crate::sampling::{sample_values, SamplerConfig};
use crate::table::{Column, Table};

pub const MAX_SEMANTIC_SEGMENTS: usize = 3;
pub const MAX_SEMANTIC_VALUES: usize = 15;
const MAX_REDRAWS: usize = 5;
const EDIT_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Anchor,
    Structural,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMember {
    pub name: String,
    pub values: Vec<String>,
    pub origin: Origin,
}

/// One anchor column and its variants; `members[0]` is the anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingClass {
    pub class_id: usize,
    pub members: Vec<ClassMember>,
}

impl TrainingClass {
    pub fn anchor(&self) -> &ClassMember {
        &self.members[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NameEdit {
    Delete(usize),
    Replace(usize, char),
}

/// Applies one edit at a character index; out-of-range edits are no-ops.
pub fn apply_edit(name: &str, edit: NameEdit) -> String {
    let mut chars: Vec<char> = name.chars().collect();
    match edit {
        NameEdit::Delete(i) if i < chars.len() => {
            chars.remove(i);
        }
        NameEdit::Replace(i, c) if i < chars.len() => chars[i] = c,
        _ => {}
    }
    chars.into_iter().collect()
}

/// `count` perturbed copies of `(name, values)`: values shuffled and
/// subsampled to 50-100%, and half of the names hit by one or two character
/// deletions or replacements. Variant `i` draws from its own stream of `seed`.
pub fn structural_variants(name: &str, values: &[String], count: usize, seed: u64) -> Vec<(String, Vec<String>)> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut draw = draw_variant(name, values, &mut rng);
            for _ in 0..MAX_REDRAWS {
                if draw.0 != name || draw.1 != values {
                    break;
                }
                draw = draw_variant(name, values, &mut rng);
            }
            if draw.0 == name && draw.1 == values {
                draw.1.shuffle(&mut rng);
                if draw.1 == values {
                    draw.1.rotate_left(1);
                }
            }
            draw
        })
        .collect()
}

fn draw_variant(name: &str, values: &[String], rng: &mut ChaCha8Rng) -> (String, Vec<String>) {
    let mut vals = values.to_vec();
    vals.shuffle(rng);
    let keep = if vals.is_empty() {
        0
    } else {
        rng.random_range(vals.len().div_ceil(2)..=vals.len())
    };
    vals.truncate(keep);

    let mut new_name = name.to_string();
    if rng.random_bool(0.5) {
        for _ in 0..rng.random_range(1..=2) {
            let len = new_name.chars().count();
            if len == 0 {
                break;
            }
            let at = rng.random_range(0..len);
            let delete = rng.random_bool(0.5) && len > 1;
            let c = EDIT_ALPHABET[rng.random_range(0..EDIT_ALPHABET.len())] as char;
            let edit = if delete { NameEdit::Delete(at) } else { NameEdit::Replace(at, c) };
            new_name = apply_edit(&new_name, edit);
        }
    }
    (new_name, vals)
}

pub fn build_augmentation_prompt(name: &str, sample: &[String]) -> String {
    format!(
        "Given the table column {name} with values [{}], generate three alternative column names that adhere to typical database naming conventions such as underscores and abbreviations. Additionally, provide distinct, technically correct synonyms, variants, or abbreviations for the listed values. For columns with numerical or datetime data, generate random numbers or dates appropriate to the column's semantic meaning.\n\n\
         Ensure that each set does not exceed 15 values.\n\
         Format your output as follows:\n\
         alternative_name_1, value1, value2, value3, ...; alternative_name_2, value1, value2, value3, ...; alternative_name_3, value1, value2, value3, ...\n\
         Ensure your response excludes additional information and quotations.",
        sample.join(", ")
    )
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unparseable augmentation response")]
pub struct AugmentParseError;

/// A proposed column name with its values.
type Variant = (String, Vec<String>);

/// Splits `name, v1, v2; name, v1; ...` into at most three `(name, values)`
/// sets of at most 15 values each.
pub fn parse_augmentation_response(text: &str) -> std::result::Result<Vec<Variant>, AugmentParseError> {
    let out: Vec<(String, Vec<String>)> = text
        .split(';')
        .filter_map(|segment| {
            let mut tokens = segment.split(',').map(str::trim);
            let name = tokens.next().filter(|n| !n.is_empty())?;
            let values = tokens
                .filter(|v| !v.is_empty())
                .take(MAX_SEMANTIC_VALUES)
                .map(str::to_string)
                .collect();
            Some((name.to_string(), values))
        })
        .take(MAX_SEMANTIC_SEGMENTS)
        .collect();
    if out.is_empty() {
        Err(AugmentParseError)
    } else {
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub n_structural: usize,
    pub n_semantic: usize,
    pub seed: u64,
    pub max_concurrent: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            n_structural: 2,
            n_semantic: 3,
            seed: 0,
            max_concurrent: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentWarning(pub String);

impl fmt::Display for AugmentWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Distinct non-missing values in first-appearance order.
fn distinct_values(column: &Column) -> Vec<String> {
    let set: IndexSet<&str> = column.non_missing().collect();
    set.into_iter().map(str::to_string).collect()
}

/// One class per target column, ids in column order. Without a client, or
/// when a column's LLM requests keep failing, that class holds structural
/// variants only and a warning is returned.
pub fn build_classes(
    target: &Table,
    config: &AugmentConfig,
    client: Option<&dyn ChatClient>,
) -> Result<(Vec<TrainingClass>, Vec<AugmentWarning>)> {
    if target.is_empty() {
        return Err(Error::Config("augmentation needs a non-empty target table".into()));
    }
    let mut warnings = Vec::new();
    let sampler = SamplerConfig {
        seed: config.seed,
        ..SamplerConfig::default()
    };
    let semantic: Vec<Option<Vec<Variant>>> = match client {
        Some(client) if config.n_semantic > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(config.max_concurrent.max(1))
                .build()
                .map_err(|e| Error::Config(format!("augmentation worker pool: {e}")))?;
            pool.install(|| {
                target
                    .columns()
                    .par_iter()
                    .map(|col| {
                        let prompt = build_augmentation_prompt(&col.name, &sample_values(col, &sampler));
                        request_variants(client, &prompt)
                    })
                    .collect()
            })
        }
        Some(_) => vec![Some(Vec::new()); target.len()],
        None => {
            if config.n_semantic > 0 {
                warnings.push(AugmentWarning("no LLM configured; classes hold structural variants only".into()));
            }
            vec![Some(Vec::new()); target.len()]
        }
    };

    let mut classes = Vec::with_capacity(target.len());
    for (class_id, (col, sem)) in target.columns().iter().zip(semantic).enumerate() {
        let values = distinct_values(col);
        let mut members = vec![ClassMember {
            name: col.name.clone(),
            values: values.clone(),
            origin: Origin::Anchor,
        }];
        let col_seed = mix64(config.seed ^ mix64(class_id as u64));
        members.extend(
            structural_variants(&col.name, &values, config.n_structural, col_seed)
                .into_iter()
                .map(|(name, values)| ClassMember { name, values, origin: Origin::Structural }),
        );
        match sem {
            Some(variants) => members.extend(
                variants
                    .into_iter()
                    .filter(|(n, v)| !(n == &col.name && v == &values))
                    .take(config.n_semantic)
                    .map(|(name, values)| ClassMember { name, values, origin: Origin::Semantic }),
            ),
            None => warnings.push(AugmentWarning(format!(
                "LLM augmentation failed for column {:?}; structural variants only",
                col.name
            ))),
        }
        classes.push(TrainingClass { class_id, members });
    }
    Ok((classes, warnings))
}

fn request_variants(client: &dyn ChatClient, prompt: &str) -> Option<Vec<(String, Vec<String>)>> {
    for attempt in 1..=MAX_ATTEMPTS {
        match client.complete(prompt) {
            Ok(text) => match parse_augmentation_response(&text) {
                Ok(v) => return Some(v),
                Err(e) => log::debug!("augmentation attempt {attempt}: {e}"),
            },
            Err(e) => log::debug!("augmentation attempt {attempt}: {e}"),
        }
    }
    None
}

/// One JSON object per line.
pub fn write_classes(classes: &[TrainingClass]) -> String {
    classes
        .iter()
        .map(|c| serde_json::to_string(c).expect("class serializes") + "\n")
        .collect()
}

pub fn parse_classes(bytes: &[u8]) -> Result<Vec<TrainingClass>> {
    const CTX: &str = "classes file";
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Encoding {
        context: CTX.to_string(),
    })?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let class: TrainingClass =
            serde_json::from_str(line).map_err(|e| Error::format(CTX, format!("line {}: {e}", i + 1)))?;
        if class.members.is_empty() {
            return Err(Error::format(CTX, format!("line {}: class has no members", i + 1)));
        }
        if !seen.insert(class.class_id) {
            return Err(Error::format(CTX, format!("line {}: duplicate class id {}", i + 1, class.class_id)));
        }
        out.push(class);
    }
    Ok(out)
}

pub fn load_classes(path: impl AsRef<std::path::Path>) -> Result<Vec<TrainingClass>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_classes(&bytes)
}
