//! File formats: edge lists, probability and feature tables, label files,
//! and per-observation prediction-set records.
//!
//! Tabular data moves as CSV with a header row. Two column names are
//! reserved: an `id` column (first position only) carries row identifiers,
//! and a `label` column (any position) carries true class labels; every
//! other column is a class (probability tables) or a feature. Floats are
//! written with Rust's shortest round-trip formatting, so a written file
//! parses back to bit-identical values.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, FeatureMatrix};
use crate::graph::{GraphError, LabelGraph};
use crate::scores::{ClassMap, ProbMatrix, ScoreError};
use crate::sets::PredictionSet;

/// Errors raised while reading or writing data files.
#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Reads a `parent<TAB>child` edge list. Blank lines and lines starting
/// with `#` are skipped.
pub fn read_edges(path: impl AsRef<Path>) -> Result<Vec<(String, String)>, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let parent = fields.next().unwrap_or("").trim();
        let child = fields.next().map(str::trim);
        let extra = fields.next();
        match (child, extra) {
            (Some(child), None) if !parent.is_empty() && !child.is_empty() => {
                edges.push((parent.to_string(), child.to_string()));
            }
            _ => {
                return Err(IoError::Parse(format!(
                    "{}:{}: expected exactly `parent<TAB>child`, got {line:?}",
                    path.display(),
                    lineno + 1,
                )));
            }
        }
    }
    if edges.is_empty() {
        return Err(IoError::Parse(format!("{}: no edges found", path.display())));
    }
    Ok(edges)
}

/// Reads an edge list and builds the label graph.
pub fn load_graph(path: impl AsRef<Path>) -> Result<LabelGraph, IoError> {
    Ok(LabelGraph::from_edges(&read_edges(path)?)?)
}

/// Writes a graph back out as a `parent<TAB>child` edge list, in node-id
/// order. Edges from a synthesized root are skipped: they were never part
/// of any input.
pub fn write_edges(path: impl AsRef<Path>, graph: &LabelGraph) -> Result<(), IoError> {
    let mut out = BufWriter::new(fs::File::create(path.as_ref())?);
    for index in 0..graph.node_count() {
        let parent = crate::graph::NodeId(index as u32);
        if graph.has_synthetic_root() && parent == graph.root() {
            continue;
        }
        for &child in graph.children_of(parent) {
            writeln!(out, "{}\t{}", graph.name(parent), graph.name(child))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// A parsed probability table: one row per observation, one column per
/// class, plus whatever `id`/`label` columns the file carried.
#[derive(Debug, Clone)]
pub struct ProbsFile {
    pub probs: ProbMatrix,
    pub labels: Option<Vec<String>>,
}

/// A parsed feature table, same conventions as [`ProbsFile`].
#[derive(Debug, Clone)]
pub struct FeaturesFile {
    pub features: FeatureMatrix,
    pub labels: Option<Vec<String>>,
}

struct Table {
    value_names: Vec<String>,
    values: Vec<f64>,
    ids: Option<Vec<String>>,
    labels: Option<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table, IoError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let id_col = (headers.len() > 0 && &headers[0] == "id").then_some(0);
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .filter(|&j| Some(j) != id_col);
    let value_cols: Vec<usize> = (0..headers.len())
        .filter(|j| Some(*j) != id_col && Some(*j) != label_col)
        .collect();
    let value_names: Vec<String> =
        value_cols.iter().map(|&j| headers[j].to_string()).collect();
    if value_names.is_empty() {
        return Err(IoError::Parse(format!(
            "{}: no data columns besides id/label",
            path.display()
        )));
    }
    let mut values = Vec::new();
    let mut ids = id_col.map(|_| Vec::new());
    let mut labels = label_col.map(|_| Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if let (Some(j), Some(ids)) = (id_col, ids.as_mut()) {
            ids.push(record[j].to_string());
        }
        if let (Some(j), Some(labels)) = (label_col, labels.as_mut()) {
            labels.push(record[j].to_string());
        }
        for &j in &value_cols {
            let field = &record[j];
            let v: f64 = field.trim().parse().map_err(|_| {
                IoError::Parse(format!(
                    "{}: row {}, column {:?}: {field:?} is not a number",
                    path.display(),
                    i + 1,
                    &headers[j],
                ))
            })?;
            values.push(v);
        }
    }
    Ok(Table { value_names, values, ids, labels })
}

/// Reads a probability CSV. Header = class names; an optional leading `id`
/// column and an optional `label` column are recognized by name.
pub fn read_probs_csv(path: impl AsRef<Path>) -> Result<ProbsFile, IoError> {
    let table = read_table(path.as_ref())?;
    let probs = ProbMatrix::new(table.value_names, table.values)?;
    let probs = match table.ids {
        Some(ids) => probs.with_ids(ids)?,
        None => probs,
    };
    Ok(ProbsFile { probs, labels: table.labels })
}

/// Reads a feature CSV. Header = feature names; `id`/`label` columns as in
/// [`read_probs_csv`].
pub fn read_features_csv(path: impl AsRef<Path>) -> Result<FeaturesFile, IoError> {
    let table = read_table(path.as_ref())?;
    let features = FeatureMatrix::new(table.value_names, table.values)?;
    let features = match table.ids {
        Some(ids) => features.with_ids(ids)?,
        None => features,
    };
    Ok(FeaturesFile { features, labels: table.labels })
}

/// Reads one label per line; surrounding whitespace is trimmed and blank
/// lines are rejected (a missing label would silently shift every row after
/// it).
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<String>, IoError> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut labels = Vec::new();
    let mut pending_blanks = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let label = line.trim();
        if label.is_empty() {
            // Tolerate trailing blank lines only.
            pending_blanks += 1;
            continue;
        }
        if pending_blanks > 0 {
            return Err(IoError::Parse(format!(
                "{}:{}: blank label line",
                path.display(),
                lineno + 1 - pending_blanks,
            )));
        }
        labels.push(label.to_string());
    }
    if labels.is_empty() {
        return Err(IoError::Parse(format!("{}: no labels found", path.display())));
    }
    Ok(labels)
}

fn write_table(
    path: &Path,
    value_names: &[String],
    n_rows: usize,
    row: impl Fn(usize) -> Vec<f64>,
    ids: Option<&[String]>,
    labels: Option<&[String]>,
) -> Result<(), IoError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = Vec::new();
    if ids.is_some() {
        header.push("id");
    }
    header.extend(value_names.iter().map(String::as_str));
    if labels.is_some() {
        header.push("label");
    }
    writer.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..n_rows {
        record.clear();
        if let Some(ids) = ids {
            record.push(ids[i].clone());
        }
        record.extend(row(i).iter().map(|v| v.to_string()));
        if let Some(labels) = labels {
            record.push(labels[i].clone());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes a feature CSV (with the matrix's ids, if any, and optional
/// labels). Floats use shortest round-trip formatting.
pub fn write_features_csv(
    path: impl AsRef<Path>,
    features: &FeatureMatrix,
    labels: Option<&[String]>,
) -> Result<(), IoError> {
    if let Some(labels) = labels {
        if labels.len() != features.n_rows() {
            return Err(IoError::Parse(format!(
                "{} labels for {} rows",
                labels.len(),
                features.n_rows()
            )));
        }
    }
    write_table(
        path.as_ref(),
        features.feature_names(),
        features.n_rows(),
        |i| features.row(i).to_vec(),
        features.ids(),
        labels,
    )
}

/// Writes a probability CSV, mirroring [`read_probs_csv`].
pub fn write_probs_csv(
    path: impl AsRef<Path>,
    probs: &ProbMatrix,
    labels: Option<&[String]>,
) -> Result<(), IoError> {
    if let Some(labels) = labels {
        if labels.len() != probs.n_rows() {
            return Err(IoError::Parse(format!(
                "{} labels for {} rows",
                labels.len(),
                probs.n_rows()
            )));
        }
    }
    write_table(
        path.as_ref(),
        probs.class_names(),
        probs.n_rows(),
        |i| probs.row(i).to_vec(),
        probs.ids(),
        labels,
    )
}

/// One prediction set as written to JSONL output: the observation id, the
/// member leaf classes, the anchor node (graph method only), the set size,
/// and its homogeneity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRecord {
    pub id: String,
    pub leaves: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<String>,
    pub size: usize,
    pub homogeneity: f64,
}

impl SetRecord {
    /// Builds the record for one set. `id` should be the row's identifier
    /// (or a synthesized `r<index>` when the input had none).
    pub fn new(map: &ClassMap, set: &PredictionSet, id: String) -> SetRecord {
        SetRecord {
            id,
            leaves: set
                .member_names(map.class_names())
                .into_iter()
                .map(str::to_string)
                .collect(),
            anchor: set.anchor().map(|a| map.graph().name(a).to_string()),
            size: set.size(),
            homogeneity: map.homogeneity(set.classes()),
        }
    }
}

/// Writes one JSON object per line.
pub fn write_sets_jsonl(
    path: impl AsRef<Path>,
    records: &[SetRecord],
) -> Result<(), IoError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL file of [`SetRecord`]s.
pub fn read_sets_jsonl(path: impl AsRef<Path>) -> Result<Vec<SetRecord>, IoError> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SetRecord = serde_json::from_str(&line).map_err(|e| {
            IoError::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}
