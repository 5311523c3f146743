//! Grid experiments over sampling, serialization, reranker and projection
//! head, aggregated as mean and population standard deviation over every
//! (table pair, repetition) run of a cell.
//!
//! Each finished run is appended to `runs.jsonl` in the output directory
//! before aggregation; a rerun skips runs already recorded there.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::ChatClient;
use crate::pipeline::{Pipeline, PipelineConfig, Reranker};
use crate::sampling::Strategy;
use crate::serialize::Format;
use crate::table::{load_ground_truth, load_table, GroundTruth, Table};

pub const RUNS_FILE: &str = "runs.jsonl";
pub const CSV_FILE: &str = "results.csv";
pub const TABLE_FILE: &str = "results.txt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TablePair {
    pub source: PathBuf,
    pub target: PathBuf,
    pub ground_truth: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub suite: Vec<TablePair>,
    #[serde(default = "default_sampling")]
    pub sampling: Vec<Strategy>,
    #[serde(default = "default_serialization")]
    pub serialization: Vec<Format>,
    #[serde(default = "default_rerankers")]
    pub rerankers: Vec<Reranker>,
    /// `null` entries run without a head.
    #[serde(default = "default_projections")]
    pub projections: Vec<Option<PathBuf>>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Seed of repetition `r` is `seeds[r % len]`, or `r` when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Settings shared by every cell; the axes override their fields.
    #[serde(default)]
    pub base: PipelineConfig,
}

fn default_sampling() -> Vec<Strategy> {
    vec![Strategy::Priority]
}
fn default_serialization() -> Vec<Format> {
    vec![Format::Default]
}
fn default_rerankers() -> Vec<Reranker> {
    vec![Reranker::Bipartite]
}
fn default_projections() -> Vec<Option<PathBuf>> {
    vec![None]
}
fn default_repetitions() -> usize {
    3
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.suite.is_empty() {
            return Err(Error::Config("grid suite is empty".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.sampling.is_empty() || self.serialization.is_empty() || self.rerankers.is_empty() || self.projections.is_empty() {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        self.base.validate()
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let grid: ExperimentGrid =
            serde_json::from_slice(bytes).map_err(|e| Error::format("experiment grid", e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    /// Loads a grid file, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut grid = Self::from_json(&bytes)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for pair in &mut grid.suite {
            fix(&mut pair.source);
            fix(&mut pair.target);
            fix(&mut pair.ground_truth);
        }
        grid.projections.iter_mut().flatten().for_each(fix);
        Ok(grid)
    }

    pub fn seed(&self, repetition: usize) -> u64 {
        if self.seeds.is_empty() {
            repetition as u64
        } else {
            self.seeds[repetition % self.seeds.len()]
        }
    }

    /// Cells in axis order: sampling, serialization, reranker, projection.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &sampling in &self.sampling {
            for &serialization in &self.serialization {
                for &reranker in &self.rerankers {
                    for projection in &self.projections {
                        out.push(Cell {
                            sampling,
                            serialization,
                            reranker,
                            projection: projection.clone(),
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub sampling: Strategy,
    pub serialization: Format,
    pub reranker: Reranker,
    pub projection: Option<PathBuf>,
}

impl Cell {
    pub fn projection_label(&self) -> String {
        self.projection
            .as_ref()
            .map_or_else(|| "none".to_string(), |p| p.display().to_string())
    }

    pub fn key(&self) -> String {
        format!(
            "sampling={}|serialization={}|reranker={}|projection={}",
            self.sampling.as_str(),
            self.serialization.as_str(),
            self.reranker.as_str(),
            self.projection_label()
        )
    }

    fn config(&self, base: &PipelineConfig, seed: u64) -> PipelineConfig {
        let mut cfg = base.clone();
        cfg.sampler.strategy = self.sampling;
        cfg.serialization.format = self.serialization;
        cfg.reranker = self.reranker;
        cfg.projection = self.projection.clone();
        cfg.seed = seed;
        cfg
    }
}

/// One evaluated (cell, pair, repetition); exactly one of the metrics pair
/// and `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: String,
    pub pair: usize,
    pub repetition: usize,
    pub seed: u64,
    pub mrr: Option<f64>,
    pub recall_at_gt: Option<f64>,
    pub error: Option<String>,
}

impl RunRecord {
    fn key(&self) -> (String, usize, usize) {
        (self.cell.clone(), self.pair, self.repetition)
    }
}

/// Parses a checkpoint; a torn final line (no trailing newline) is dropped.
/// Returns the records and the byte length of the intact prefix.
pub fn parse_runs(bytes: &[u8]) -> Result<(Vec<RunRecord>, usize)> {
    const CTX: &str = "run checkpoint";
    let intact = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let text = std::str::from_utf8(&bytes[..intact]).map_err(|_| Error::Encoding {
        context: CTX.to_string(),
    })?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(CTX, format!("line {}: {e}", i + 1))))
        .collect::<Result<Vec<RunRecord>>>()?;
    Ok((records, intact))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation; `None` for no values.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub runs: usize,
    pub failures: usize,
    pub mrr: Option<Stat>,
    pub recall_at_gt: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub rows: Vec<CellSummary>,
    pub records: Vec<RunRecord>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "sampling,serialization,reranker,projection,runs,failures,mrr_mean,mrr_std,recall_mean,recall_std\n",
        );
        let num = |s: Option<Stat>, f: fn(Stat) -> f64| s.map_or_else(String::new, |s| format!("{:.6}", f(s)));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.cell.sampling.as_str(),
                r.cell.serialization.as_str(),
                r.cell.reranker.as_str(),
                csv_field(&r.cell.projection_label()),
                r.runs,
                r.failures,
                num(r.mrr, |s| s.mean),
                num(r.mrr, |s| s.std),
                num(r.recall_at_gt, |s| s.mean),
                num(r.recall_at_gt, |s| s.std),
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let header = ["sampling", "serialization", "reranker", "projection", "runs", "MRR", "Recall@GT"];
        let show = |s: Option<Stat>| s.map_or_else(|| "failed".to_string(), |s| s.to_string());
        let rows: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                let runs = if r.failures > 0 {
                    format!("{} ({} failed)", r.runs, r.failures)
                } else {
                    r.runs.to_string()
                };
                [
                    r.cell.sampling.as_str().to_string(),
                    r.cell.serialization.as_str().to_string(),
                    r.cell.reranker.as_str().to_string(),
                    r.cell.projection_label(),
                    runs,
                    show(r.mrr),
                    show(r.recall_at_gt),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..7)
            .map(|i| rows.iter().map(|r| r[i].chars().count()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |cells: &[&str], out: &mut String| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&header, &mut out);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&rule.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
        for r in &rows {
            line(&r.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

type LoadedPair = std::result::Result<(Table, Table, GroundTruth), String>;

/// Runs every missing (cell, pair, repetition) with up to `workers` in
/// parallel, then writes `results.csv` and `results.txt` to `out_dir`.
pub fn run_grid(
    grid: &ExperimentGrid,
    out_dir: &Path,
    chat: Option<Arc<dyn ChatClient>>,
    workers: usize,
) -> Result<GridResult> {
    grid.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let runs_path = out_dir.join(RUNS_FILE);

    let mut done: HashMap<(String, usize, usize), RunRecord> = HashMap::new();
    match std::fs::read(&runs_path) {
        Ok(bytes) => {
            let (records, intact) = parse_runs(&bytes)?;
            if intact < bytes.len() {
                log::warn!("dropping a torn final record from {}", runs_path.display());
                let f = OpenOptions::new().write(true).open(&runs_path).map_err(|e| Error::io(&runs_path, e))?;
                f.set_len(intact as u64).map_err(|e| Error::io(&runs_path, e))?;
            }
            for r in records {
                done.insert(r.key(), r);
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(&runs_path, e)),
    }

    let cells = grid.cells();
    let mut todo = Vec::new();
    for cell in &cells {
        let key = cell.key();
        for pair in 0..grid.suite.len() {
            for rep in 0..grid.repetitions {
                if !done.contains_key(&(key.clone(), pair, rep)) {
                    todo.push((cell, pair, rep));
                }
            }
        }
    }
    log::info!("{} of {} runs already recorded", cells.len() * grid.suite.len() * grid.repetitions - todo.len(), cells.len() * grid.suite.len() * grid.repetitions);

    if !todo.is_empty() {
        let pairs: Vec<LoadedPair> = grid.suite.iter().enumerate().map(|(i, p)| load_pair(i, p)).collect();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&runs_path)
            .map_err(|e| Error::io(&runs_path, e))?;
        let file = Mutex::new(file);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("grid worker pool: {e}")))?;
        let fresh: Vec<RunRecord> = pool.install(|| {
            todo.par_iter()
                .map(|&(cell, pair, rep)| -> Result<RunRecord> {
                    let seed = grid.seed(rep);
                    let record = run_one(cell, &pairs[pair], &grid.base, seed, chat.clone(), pair, rep);
                    let mut line = serde_json::to_string(&record).expect("record serializes");
                    line.push('\n');
                    let mut f = file.lock().expect("checkpoint lock");
                    f.write_all(line.as_bytes()).map_err(|e| Error::io(&runs_path, e))?;
                    f.flush().map_err(|e| Error::io(&runs_path, e))?;
                    Ok(record)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for r in fresh {
            done.insert(r.key(), r);
        }
    }

    let mut rows = Vec::with_capacity(cells.len());
    let mut records = Vec::new();
    for cell in cells {
        let key = cell.key();
        let cell_records: Vec<&RunRecord> = (0..grid.suite.len())
            .flat_map(|p| (0..grid.repetitions).map(move |r| (p, r)))
            .map(|(p, r)| &done[&(key.clone(), p, r)])
            .collect();
        let ok: Vec<&&RunRecord> = cell_records.iter().filter(|r| r.error.is_none()).collect();
        let mrrs: Vec<f64> = ok.iter().filter_map(|r| r.mrr).collect();
        let recalls: Vec<f64> = ok.iter().filter_map(|r| r.recall_at_gt).collect();
        rows.push(CellSummary {
            runs: cell_records.len(),
            failures: cell_records.len() - ok.len(),
            mrr: Stat::of(&mrrs),
            recall_at_gt: Stat::of(&recalls),
            cell,
        });
        records.extend(cell_records.into_iter().cloned());
    }
    let result = GridResult { rows, records };
    let write = |name: &str, body: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write(CSV_FILE, result.to_csv())?;
    write(TABLE_FILE, result.to_table())?;
    Ok(result)
}

fn load_pair(index: usize, pair: &TablePair) -> LoadedPair {
    let name = |p: &Path, fallback: &str| {
        p.file_stem().map_or_else(|| format!("{fallback}{index}"), |s| s.to_string_lossy().into_owned())
    };
    let source = load_table(&pair.source, &name(&pair.source, "source")).map_err(|e| e.to_string())?;
    let target = load_table(&pair.target, &name(&pair.target, "target")).map_err(|e| e.to_string())?;
    let gt = load_ground_truth(&pair.ground_truth).map_err(|e| e.to_string())?;
    Ok((source, target, gt))
}

fn run_one(
    cell: &Cell,
    pair: &LoadedPair,
    base: &PipelineConfig,
    seed: u64,
    chat: Option<Arc<dyn ChatClient>>,
    pair_index: usize,
    repetition: usize,
) -> RunRecord {
    let mut record = RunRecord {
        cell: cell.key(),
        pair: pair_index,
        repetition,
        seed,
        mrr: None,
        recall_at_gt: None,
        error: None,
    };
    let outcome = pair.as_ref().map_err(Clone::clone).and_then(|(source, target, gt)| {
        let cfg = cell.config(base, seed);
        let chat = chat.map(|c| Box::new(c) as Box<dyn ChatClient>);
        let pipeline = Pipeline::new(cfg, chat).map_err(|e| e.to_string())?;
        pipeline.evaluate(source, target, gt).map_err(|e| e.to_string())
    });
    match outcome {
        Ok(report) => {
            record.mrr = Some(report.mrr);
            record.recall_at_gt = Some(report.recall_at_gt);
        }
        Err(e) => {
            log::warn!("{} pair {pair_index} repetition {repetition}: {e}", record.cell);
            record.error = Some(e);
        }
    }
    record
}

/// Per-cell aggregates recomputed from raw records, keyed by cell key.
pub fn aggregate_records(records: &[RunRecord]) -> BTreeMap<String, (Option<Stat>, Option<Stat>)> {
    let mut by_cell: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let entry = by_cell.entry(r.cell.clone()).or_default();
        if r.error.is_none() {
            entry.0.extend(r.mrr);
            entry.1.extend(r.recall_at_gt);
        }
    }
    by_cell
        .into_iter()
        .map(|(k, (m, r))| (k, (Stat::of(&m), Stat::of(&r))))
        .collect()
}
