//! On-disk scenario corpus.
//!
//! ```text
//! corpus_dir/
//!   manifest.json        # CorpusManifest
//!   graphs/<id>.json     # {"num_nodes", "edges": [[src, dst, weight]], "static_features"}
//!   series/<id>.csv      # header node_0..node_{N-1}, one row per step, `NaN` allowed
//! ```
//!
//! Floats in CSV are written with 9 significant digits. Writing is
//! deterministic, so the same corpus always produces byte-identical files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::TrafficGraph;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: line {line}: expected {expected} cells, found {found}")]
    RaggedRow {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: line {line}, column {column}: cannot parse `{cell}` as a number")]
    BadCell {
        path: PathBuf,
        line: usize,
        column: usize,
        cell: String,
    },
    #[error("{path}: header must be node_0..node_{{N-1}}, found `{found}`")]
    BadHeader { path: PathBuf, found: String },
    #[error("{path}: series has {series} nodes but graph has {graph}")]
    NodeCountMismatch { path: PathBuf, series: usize, graph: usize },
    #[error("{path}: series has no rows")]
    EmptySeries { path: PathBuf },
    #[error("duplicate scenario id `{0}`")]
    DuplicateId(String),
    #[error("manifest version {found} is not supported (expected {MANIFEST_VERSION})")]
    Version { found: u32 },
    #[error("scenario `{id}`: removed edge ({src}, {dst}) is still present in its graph")]
    RemovedEdgePresent { id: String, src: usize, dst: usize },
    #[error("scenarios disagree on the node set: `{id}` has {found} nodes, expected {expected}")]
    NodeSetMismatch { id: String, found: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitHint {
    Train,
    Val,
    Test,
}

/// One fixed-topology scenario and its `T×N` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDataset {
    pub id: String,
    pub graph: TrafficGraph,
    /// `T×N`, NaN marks a missing observation.
    pub series: Tensor,
    pub removed_edges: Vec<(usize, usize)>,
    pub split_hint: SplitHint,
}

impl ScenarioDataset {
    pub fn num_steps(&self) -> usize {
        self.series.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.series.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub interval_minutes: f64,
    pub variable_name: String,
    /// Long inter-cluster links of the base network, both directions.
    pub bridges: Vec<(usize, usize)>,
    pub scenarios: Vec<ScenarioDataset>,
}

impl Corpus {
    pub fn scenario(&self, id: &str) -> Option<&ScenarioDataset> {
        self.scenarios.iter().find(|s| s.id == id)
    }

    pub fn with_hint(&self, hint: SplitHint) -> impl Iterator<Item = &ScenarioDataset> {
        self.scenarios.iter().filter(move |s| s.split_hint == hint)
    }

    pub fn num_nodes(&self) -> Option<usize> {
        self.scenarios.first().map(ScenarioDataset::num_nodes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub interval_minutes: f64,
    pub variable_name: String,
    #[serde(default)]
    pub bridges: Vec<(usize, usize)>,
    pub scenarios: Vec<ScenarioEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEntry {
    pub id: String,
    pub graph_file: String,
    pub series_file: String,
    pub removed_edges: Vec<(usize, usize)>,
    pub split_hint: SplitHint,
}

/// Rounds to 9 significant decimal digits.
pub fn round_sig9(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

/// 9-significant-digit text; `NaN` for missing values.
pub fn format_sig9(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{}", round_sig9(v))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn series_to_csv(series: &Tensor) -> String {
    let n = series.shape()[1];
    let mut out = String::new();
    let header: Vec<String> = (0..n).map(|i| format!("node_{i}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in series.rows() {
        for (i, &v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", format_sig9(v));
        }
        out.push('\n');
    }
    out
}

pub fn parse_series_csv(text: &str, path: &Path) -> Result<Tensor, DatasetError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let valid_header = !header.trim().is_empty() && names.iter().enumerate().all(|(i, h)| *h == format!("node_{i}"));
    if !valid_header {
        return Err(DatasetError::BadHeader {
            path: path.to_path_buf(),
            found: header.to_string(),
        });
    }
    let n = names.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != n {
            return Err(DatasetError::RaggedRow {
                path: path.to_path_buf(),
                line: line_no,
                expected: n,
                found: cells.len(),
            });
        }
        for (col, cell) in cells.iter().enumerate() {
            let v = if cell.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| DatasetError::BadCell {
                    path: path.to_path_buf(),
                    line: line_no,
                    column: col + 1,
                    cell: cell.to_string(),
                })?
            };
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DatasetError::EmptySeries {
            path: path.to_path_buf(),
        });
    }
    Ok(Tensor::new(vec![rows, n], data).expect("rectangular by construction"))
}

fn manifest_of(corpus: &Corpus) -> CorpusManifest {
    CorpusManifest {
        version: MANIFEST_VERSION,
        interval_minutes: corpus.interval_minutes,
        variable_name: corpus.variable_name.clone(),
        bridges: corpus.bridges.clone(),
        scenarios: corpus
            .scenarios
            .iter()
            .map(|s| ScenarioEntry {
                id: s.id.clone(),
                graph_file: format!("graphs/{}.json", s.id),
                series_file: format!("series/{}.csv", s.id),
                removed_edges: s.removed_edges.clone(),
                split_hint: s.split_hint,
            })
            .collect(),
    }
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), DatasetError> {
    let manifest = manifest_of(corpus);
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    if !corpus.scenarios.is_empty() {
        for sub in ["graphs", "series"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
    }
    for (s, entry) in corpus.scenarios.iter().zip(&manifest.scenarios) {
        let gp = dir.join(&entry.graph_file);
        let json = serde_json::to_string(&s.graph).map_err(|source| DatasetError::Json {
            path: gp.clone(),
            source,
        })?;
        fs::write(&gp, json + "\n").map_err(io_err(&gp))?;
        let sp = dir.join(&entry.series_file);
        fs::write(&sp, series_to_csv(&s.series)).map_err(io_err(&sp))?;
    }
    let mp = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|source| DatasetError::Json {
        path: mp.clone(),
        source,
    })?;
    fs::write(&mp, json + "\n").map_err(io_err(&mp))
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest, DatasetError> {
    let mp = dir.join("manifest.json");
    let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: mp.clone(),
        source,
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DatasetError::Version {
            found: manifest.version,
        });
    }
    let mut ids = BTreeSet::new();
    for e in &manifest.scenarios {
        if !ids.insert(e.id.as_str()) {
            return Err(DatasetError::DuplicateId(e.id.clone()));
        }
    }
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, DatasetError> {
    let manifest = read_manifest(dir)?;
    // Check every referenced file exists before parsing anything.
    for e in &manifest.scenarios {
        for f in [&e.graph_file, &e.series_file] {
            let p = dir.join(f);
            if !p.is_file() {
                return Err(DatasetError::Io {
                    path: p,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file is missing"),
                });
            }
        }
    }
    let mut scenarios = Vec::with_capacity(manifest.scenarios.len());
    let mut expected_nodes = None;
    for e in manifest.scenarios {
        let gp = dir.join(&e.graph_file);
        let text = fs::read_to_string(&gp).map_err(io_err(&gp))?;
        let graph: TrafficGraph = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: gp.clone(),
            source,
        })?;
        let sp = dir.join(&e.series_file);
        let text = fs::read_to_string(&sp).map_err(io_err(&sp))?;
        let series = parse_series_csv(&text, &sp)?;
        if series.shape()[1] != graph.num_nodes() {
            return Err(DatasetError::NodeCountMismatch {
                path: sp,
                series: series.shape()[1],
                graph: graph.num_nodes(),
            });
        }
        let expected = *expected_nodes.get_or_insert(graph.num_nodes());
        if graph.num_nodes() != expected {
            return Err(DatasetError::NodeSetMismatch {
                id: e.id,
                found: graph.num_nodes(),
                expected,
            });
        }
        if let Some(&(src, dst)) = e.removed_edges.iter().find(|(s, d)| graph.has_edge(*s, *d)) {
            return Err(DatasetError::RemovedEdgePresent { id: e.id, src, dst });
        }
        scenarios.push(ScenarioDataset {
            id: e.id,
            graph,
            series,
            removed_edges: e.removed_edges,
            split_hint: e.split_hint,
        });
    }
    Ok(Corpus {
        interval_minutes: manifest.interval_minutes,
        variable_name: manifest.variable_name,
        bridges: manifest.bridges,
        scenarios,
    })
}
