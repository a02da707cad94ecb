//! Probability matrices, conformal scores, and the binding between a
//! probability matrix's class columns and a label graph's leaves.
//!
//! The conformity score of a labeled observation is `1 - p(true class)`:
//! small when the model puts mass on the truth, near 1 when it does not.
//! Node scores generalize this to internal graph nodes by summing the
//! probability mass of every leaf under the node; the root therefore always
//! scores 1 (up to the row-sum tolerance).

use std::collections::HashMap;

use thiserror::Error;

use crate::graph::{LabelGraph, NodeId};

/// Tolerance for treating a probability row as normalized. Rows further
/// than this from summing to 1 are rejected, never renormalized: silent
/// renormalization would hide upstream model bugs.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Errors from matrix validation, label binding and score queries.
#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("duplicate class name {0:?}")]
    DuplicateClass(String),
    #[error("data length {got} is not a multiple of {classes} classes")]
    RaggedData { got: usize, classes: usize },
    #[error("row {row} sums to {sum}, outside 1 +/- {ROW_SUM_TOLERANCE}")]
    RowSumInvalid { row: usize, sum: f64 },
    #[error("row {row} has probability {value} outside [0, 1]")]
    EntryOutOfRange { row: usize, value: f64 },
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("label {0:?} is not among the class names")]
    LabelNotInClasses(String),
    #[error("row index {row} out of range for {n} rows")]
    RowOutOfRange { row: usize, n: usize },
    #[error("class columns do not match the graph leaves: {0}")]
    GraphClassMismatch(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
}

/// Row-major matrix of predicted class probabilities.
///
/// Every row is validated to sum to 1 within [`ROW_SUM_TOLERANCE`] with all
/// entries in `[0, 1]`. Row identifiers are optional and carried through to
/// prediction output when present.
#[derive(Debug, Clone)]
pub struct ProbMatrix {
    class_names: Vec<String>,
    class_index: HashMap<String, u32>,
    ids: Option<Vec<String>>,
    data: Vec<f64>,
    n_rows: usize,
}

impl ProbMatrix {
    pub fn new(class_names: Vec<String>, data: Vec<f64>) -> Result<Self, ScoreError> {
        let k = class_names.len();
        if k < 2 {
            return Err(ScoreError::TooFewClasses(k));
        }
        let mut class_index = HashMap::with_capacity(k);
        for (i, name) in class_names.iter().enumerate() {
            if class_index.insert(name.clone(), i as u32).is_some() {
                return Err(ScoreError::DuplicateClass(name.clone()));
            }
        }
        if data.len() % k != 0 {
            return Err(ScoreError::RaggedData { got: data.len(), classes: k });
        }
        let n_rows = data.len() / k;
        for row in 0..n_rows {
            let slice = &data[row * k..(row + 1) * k];
            let mut sum = 0.0;
            for &v in slice {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ScoreError::EntryOutOfRange { row, value: v });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(ScoreError::RowSumInvalid { row, sum });
            }
        }
        Ok(ProbMatrix { class_names, class_index, ids: None, data, n_rows })
    }

    /// Attaches row identifiers (same length as the number of rows).
    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self, ScoreError> {
        if ids.len() != self.n_rows {
            return Err(ScoreError::LengthMismatch {
                what: "ids",
                got: ids.len(),
                expected: self.n_rows,
            });
        }
        self.ids = Some(ids);
        Ok(self)
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    #[inline]
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    #[inline]
    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn class_index(&self, name: &str) -> Option<u32> {
        self.class_index.get(name).copied()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.n_classes();
        &self.data[i * k..(i + 1) * k]
    }

    /// Column index of the highest-probability class in row `i`; ties go to
    /// the first column in class order.
    pub fn point_prediction(&self, i: usize) -> Result<u32, ScoreError> {
        if i >= self.n_rows {
            return Err(ScoreError::RowOutOfRange { row: i, n: self.n_rows });
        }
        Ok(argmax_first(self.row(i)))
    }
}

/// Argmax with ties resolved to the earliest index.
pub(crate) fn argmax_first(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best as u32
}

/// Probability rows paired with their true labels (resolved to columns).
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    probs: ProbMatrix,
    label_cols: Vec<u32>,
}

impl LabeledBatch {
    pub fn new<S: AsRef<str>>(probs: ProbMatrix, labels: &[S]) -> Result<Self, ScoreError> {
        if labels.len() != probs.n_rows() {
            return Err(ScoreError::LengthMismatch {
                what: "labels",
                got: labels.len(),
                expected: probs.n_rows(),
            });
        }
        let label_cols = labels
            .iter()
            .map(|l| {
                probs
                    .class_index(l.as_ref())
                    .ok_or_else(|| ScoreError::LabelNotInClasses(l.as_ref().to_string()))
            })
            .collect::<Result<Vec<u32>, _>>()?;
        Ok(LabeledBatch { probs, label_cols })
    }

    /// Builds a batch from already-resolved label columns (internal fast
    /// path for simulation loops).
    pub(crate) fn from_cols(probs: ProbMatrix, label_cols: Vec<u32>) -> Self {
        debug_assert_eq!(label_cols.len(), probs.n_rows());
        debug_assert!(label_cols.iter().all(|&c| (c as usize) < probs.n_classes()));
        LabeledBatch { probs, label_cols }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.probs.n_rows()
    }

    #[inline]
    pub fn probs(&self) -> &ProbMatrix {
        &self.probs
    }

    #[inline]
    pub fn label_col(&self, i: usize) -> u32 {
        self.label_cols[i]
    }

    pub fn label_name(&self, i: usize) -> &str {
        &self.probs.class_names()[self.label_cols[i] as usize]
    }

    /// Conformity scores `1 - p(true class)`, one per row.
    pub fn conformal_scores(&self) -> Vec<f64> {
        (0..self.n()).map(|i| 1.0 - self.probs.row(i)[self.label_cols[i] as usize]).collect()
    }
}

/// Binding between a [`LabelGraph`] and the class columns of probability
/// matrices: requires the class names and the graph leaves to coincide
/// exactly, and precomputes each node's leaf set as sorted class columns so
/// node scores are a single gather-sum.
#[derive(Debug)]
pub struct ClassMap<'g> {
    graph: &'g LabelGraph,
    class_names: Vec<String>,
    /// class column -> leaf node.
    class_node: Vec<NodeId>,
    /// class column -> leaf ordinal in the graph.
    class_ordinal: Vec<u32>,
    /// node id -> sorted class columns of the node's leaf set.
    node_classes: Vec<Vec<u32>>,
    /// class column -> reflexive ancestors of the class's leaf. Point
    /// predictions are always leaves, so set construction only ever walks
    /// these precomputed lists.
    class_ancestors: Vec<Vec<NodeId>>,
}

impl<'g> ClassMap<'g> {
    pub fn new(graph: &'g LabelGraph, class_names: &[String]) -> Result<Self, ScoreError> {
        if class_names.len() != graph.leaf_count() {
            return Err(ScoreError::GraphClassMismatch(format!(
                "{} class columns vs {} graph leaves",
                class_names.len(),
                graph.leaf_count()
            )));
        }
        let mut class_node = Vec::with_capacity(class_names.len());
        let mut class_ordinal = Vec::with_capacity(class_names.len());
        let mut seen = vec![false; graph.leaf_count()];
        for name in class_names {
            let id = graph
                .node_id(name)
                .map_err(|_| ScoreError::GraphClassMismatch(format!("class {name:?} is not a graph node")))?;
            let ord = graph
                .leaf_ordinal(id)
                .ok_or_else(|| ScoreError::GraphClassMismatch(format!("class {name:?} is not a leaf")))?;
            if seen[ord as usize] {
                return Err(ScoreError::DuplicateClass(name.clone()));
            }
            seen[ord as usize] = true;
            class_node.push(id);
            class_ordinal.push(ord);
        }
        // Lengths match and every ordinal is distinct, so the map is a
        // bijection; precompute per-node class columns in ascending column
        // order (summation order is part of the score's definition).
        let mut ordinal_class = vec![0u32; graph.leaf_count()];
        for (col, &ord) in class_ordinal.iter().enumerate() {
            ordinal_class[ord as usize] = col as u32;
        }
        let node_classes: Vec<Vec<u32>> = (0..graph.node_count())
            .map(|i| {
                let mut cols: Vec<u32> =
                    graph.leaf_set(NodeId(i as u32)).iter().map(|&o| ordinal_class[o as usize]).collect();
                cols.sort_unstable();
                cols
            })
            .collect();
        let class_ancestors =
            class_node.iter().map(|&leaf| graph.ancestors(leaf).ids().to_vec()).collect();
        Ok(ClassMap {
            graph,
            class_names: class_names.to_vec(),
            class_node,
            class_ordinal,
            node_classes,
            class_ancestors,
        })
    }

    #[inline]
    pub fn graph(&self) -> &'g LabelGraph {
        self.graph
    }

    #[inline]
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    #[inline]
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Leaf node backing a class column.
    #[inline]
    pub fn class_node(&self, col: u32) -> NodeId {
        self.class_node[col as usize]
    }

    /// Sorted class columns under a node.
    #[inline]
    pub fn node_classes(&self, v: NodeId) -> &[u32] {
        &self.node_classes[v.index()]
    }

    /// Reflexive ancestors of the leaf behind class column `col`.
    #[inline]
    pub fn class_ancestors(&self, col: u32) -> &[NodeId] {
        &self.class_ancestors[col as usize]
    }

    /// True when class column `col` is among the leaves under node `v`.
    #[inline]
    pub fn node_covers(&self, v: NodeId, col: u32) -> bool {
        self.node_classes[v.index()].binary_search(&col).is_ok()
    }

    /// Verifies that a matrix's class columns are the ones this map was
    /// built for (same names, same order).
    pub fn check_probs(&self, probs: &ProbMatrix) -> Result<(), ScoreError> {
        if probs.class_names() != self.class_names.as_slice() {
            return Err(ScoreError::GraphClassMismatch(
                "probability matrix class columns differ from the bound graph leaves".into(),
            ));
        }
        Ok(())
    }

    /// Probability mass of the leaves under `v` for one probability row,
    /// summed in ascending column order.
    #[inline]
    pub fn node_score(&self, row: &[f64], v: NodeId) -> f64 {
        self.node_classes[v.index()].iter().map(|&c| row[c as usize]).sum()
    }

    /// Name-based node score for row `i` of `probs`.
    pub fn node_score_by_name(&self, probs: &ProbMatrix, i: usize, node: &str) -> Result<f64, ScoreError> {
        self.check_probs(probs)?;
        if i >= probs.n_rows() {
            return Err(ScoreError::RowOutOfRange { row: i, n: probs.n_rows() });
        }
        let id = self.graph.node_id(node).map_err(|_| ScoreError::UnknownNode(node.to_string()))?;
        Ok(self.node_score(probs.row(i), id))
    }

    /// Mean pairwise leaf distance between class columns.
    pub fn homogeneity(&self, cols: &[u32]) -> f64 {
        let ordinals: Vec<u32> = cols.iter().map(|&c| self.class_ordinal[c as usize]).collect();
        self.graph.homogeneity(&ordinals)
    }
}
