//! Tables, columns, type inference, and the CSV loaders for tables and
//! ground-truth match files.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Share of non-missing cells above which a column is treated as a key.
pub const KEY_DISTINCT_RATIO: f64 = 0.90;
/// Share of non-missing cells that must parse for the numerical / date labels.
pub const PARSE_THRESHOLD: f64 = 0.95;

const MISSING_MARKERS: [&str; 4] = ["na", "n/a", "null", "none"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Numerical,
    Categorical,
    Date,
    Binary,
    Key,
    Unknown,
}

impl ColumnType {
    pub fn as_str(self) -> &'static str {
        match self {
            ColumnType::Numerical => "numerical",
            ColumnType::Categorical => "categorical",
            ColumnType::Date => "date",
            ColumnType::Binary => "binary",
            ColumnType::Key => "key",
            ColumnType::Unknown => "unknown",
        }
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<Option<String>>,
    pub inferred_type: ColumnType,
}

impl Column {
    /// Builds a column from raw cells, applying the missing-value markers and
    /// inferring the type.
    pub fn from_cells<I, S>(name: impl Into<String>, cells: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let values = cells
            .into_iter()
            .map(|c| {
                let c = c.into();
                if is_missing(&c) {
                    None
                } else {
                    Some(c)
                }
            })
            .collect();
        Self::new(name, values)
    }

    pub fn new(name: impl Into<String>, values: Vec<Option<String>>) -> Self {
        let mut col = Column {
            name: name.into(),
            values,
            inferred_type: ColumnType::Unknown,
        };
        col.inferred_type = infer_type(&col);
        col
    }

    pub fn non_missing(&self) -> impl Iterator<Item = &str> {
        self.values.iter().filter_map(|v| v.as_deref())
    }
}

/// True if a raw cell counts as a missing value.
pub fn is_missing(cell: &str) -> bool {
    cell.is_empty() || MISSING_MARKERS.iter().any(|m| cell.eq_ignore_ascii_case(m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    columns: Vec<Column>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: Vec<Column>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, col) in columns.iter().enumerate() {
            if col.name.trim().is_empty() {
                return Err(Error::EmptyHeader(i));
            }
            if !seen.insert(col.name.as_str()) {
                return Err(Error::DuplicateHeader(col.name.clone()));
            }
        }
        Ok(Table {
            name: name.into(),
            columns,
        })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }
}

/// Labels a column. Rules are tried in order: unknown, key, binary,
/// numerical, date, and categorical as the remainder.
pub fn infer_type(column: &Column) -> ColumnType {
    let present: Vec<&str> = column.non_missing().collect();
    if present.is_empty() {
        return ColumnType::Unknown;
    }
    let distinct: HashSet<&str> = present.iter().copied().collect();
    let n = present.len() as f64;
    if distinct.len() as f64 / n > KEY_DISTINCT_RATIO {
        return ColumnType::Key;
    }
    if distinct.len() == 2 {
        return ColumnType::Binary;
    }
    let numeric = present.iter().filter(|v| is_decimal(v)).count() as f64;
    if numeric / n >= PARSE_THRESHOLD {
        return ColumnType::Numerical;
    }
    let dates = present.iter().filter(|v| is_iso_date(v)).count() as f64;
    if dates / n >= PARSE_THRESHOLD {
        return ColumnType::Date;
    }
    ColumnType::Categorical
}

/// `[+-]? (digits [. digits?] | . digits) ([eE] [+-]? digits)?`, surrounding
/// whitespace ignored.
pub(crate) fn is_decimal(s: &str) -> bool {
    let b = s.trim().as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        digits += i - frac_start;
    }
    if digits == 0 {
        return false;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return false;
        }
    }
    i == b.len()
}

/// ISO-8601 calendar date `YYYY-MM-DD`, optionally followed by `T` or a space
/// and a time `HH:MM[:SS[.fff]]` with an optional `Z` or `±HH:MM` offset.
pub(crate) fn is_iso_date(s: &str) -> bool {
    let s = s.trim();
    let Some(date) = s.get(..10) else {
        return false;
    };
    if NaiveDate::parse_from_str(date, "%Y-%m-%d").is_err() {
        return false;
    }
    let rest = &s[10..];
    if rest.is_empty() {
        return true;
    }
    let Some(time) = rest.strip_prefix('T').or_else(|| rest.strip_prefix(' ')) else {
        return false;
    };
    is_iso_time(time)
}

fn is_iso_time(s: &str) -> bool {
    let clock = if let Some(t) = s.strip_suffix('Z') {
        t
    } else if s.len() > 6 && matches!(s.as_bytes()[s.len() - 6], b'+' | b'-') {
        let (t, offset) = s.split_at(s.len() - 6);
        if NaiveTime::parse_from_str(&offset[1..], "%H:%M").is_err() {
            return false;
        }
        t
    } else {
        s
    };
    NaiveTime::parse_from_str(clock, "%H:%M:%S%.f").is_ok()
        || NaiveTime::parse_from_str(clock, "%H:%M").is_ok()
}

/// Reads a comma-separated file with a header row into a [`Table`].
pub fn load_table(path: impl AsRef<Path>, name: &str) -> Result<Table> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_table(name, &bytes).map_err(|e| with_context(e, path))
}

/// Parses CSV bytes (RFC-4180 quoting, first row is the header).
pub fn parse_table(name: &str, bytes: &[u8]) -> Result<Table> {
    if std::str::from_utf8(bytes).is_err() {
        return Err(Error::Encoding {
            context: name.to_string(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(name, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() {
        return Err(Error::format(name, "missing header row"));
    }
    let mut seen = HashSet::new();
    for (i, h) in headers.iter().enumerate() {
        if h.trim().is_empty() {
            return Err(Error::EmptyHeader(i));
        }
        if !seen.insert(h.as_str()) {
            return Err(Error::DuplicateHeader(h.clone()));
        }
    }
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(name, e))?;
        for (col, cell) in cells.iter_mut().zip(record.iter()) {
            col.push(cell.to_string());
        }
    }
    let columns = headers
        .into_iter()
        .zip(cells)
        .map(|(h, c)| Column::from_cells(h, c))
        .collect();
    Table::new(name, columns)
}

fn csv_error(context: &str, e: csv::Error) -> Error {
    if matches!(e.kind(), csv::ErrorKind::Utf8 { .. }) {
        return Error::Encoding {
            context: context.to_string(),
        };
    }
    Error::format(context, e.to_string())
}

fn with_context(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { message, .. } => Error::format(path.display().to_string(), message),
        Error::Encoding { .. } => Error::Encoding {
            context: path.display().to_string(),
        },
        other => other,
    }
}

/// Ground-truth correspondences: (source column, target column) pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pairs: BTreeSet<(String, String)>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, source: impl Into<String>, target: impl Into<String>) -> bool {
        self.pairs.insert((source.into(), target.into()))
    }

    pub fn contains(&self, source: &str, target: &str) -> bool {
        // BTreeSet<(String, String)> can't be probed with borrowed tuples.
        self.pairs
            .range((source.to_string(), target.to_string())..)
            .next()
            .is_some_and(|(s, t)| s == source && t == target)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(s, t)| (s.as_str(), t.as_str()))
    }

    /// Source columns that appear in at least one pair.
    pub fn sources(&self) -> BTreeSet<&str> {
        self.pairs.iter().map(|(s, _)| s.as_str()).collect()
    }
}

impl<S: Into<String>, T: Into<String>> FromIterator<(S, T)> for GroundTruth {
    fn from_iter<I: IntoIterator<Item = (S, T)>>(iter: I) -> Self {
        let mut gt = GroundTruth::new();
        for (s, t) in iter {
            gt.insert(s, t);
        }
        gt
    }
}

pub const GROUND_TRUTH_HEADER: [&str; 2] = ["source_column", "target_column"];

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ground_truth(&bytes).map_err(|e| with_context(e, path))
}

/// Parses a two-column `source_column,target_column` CSV. Duplicate rows
/// collapse into one pair.
pub fn parse_ground_truth(bytes: &[u8]) -> Result<GroundTruth> {
    const CTX: &str = "ground truth";
    if std::str::from_utf8(bytes).is_err() {
        return Err(Error::Encoding {
            context: CTX.to_string(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);
    let headers = reader.headers().map_err(|e| csv_error(CTX, e))?;
    if headers.len() != 2 {
        return Err(Error::format(
            CTX,
            format!("expected 2 columns, found {}", headers.len()),
        ));
    }
    if headers.iter().map(str::trim).ne(GROUND_TRUTH_HEADER) {
        return Err(Error::format(
            CTX,
            "header must be \"source_column,target_column\"",
        ));
    }
    let mut gt = GroundTruth::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(CTX, e))?;
        let line = i + 2;
        if record.len() != 2 {
            return Err(Error::format(
                CTX,
                format!("line {line}: expected 2 columns, found {}", record.len()),
            ));
        }
        let (source, target) = (record[0].trim(), record[1].trim());
        if source.is_empty() {
            return Err(Error::format(CTX, format!("line {line}: empty source cell")));
        }
        if target.is_empty() {
            return Err(Error::format(CTX, format!("line {line}: empty target cell")));
        }
        gt.insert(source, target);
    }
    Ok(gt)
}

impl FromStr for ColumnType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "numerical" => ColumnType::Numerical,
            "categorical" => ColumnType::Categorical,
            "date" => ColumnType::Date,
            "binary" => ColumnType::Binary,
            "key" => ColumnType::Key,
            "unknown" => ColumnType::Unknown,
            other => return Err(Error::Config(format!("unknown column type {other:?}"))),
        })
    }
}
