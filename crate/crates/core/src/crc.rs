//! Hierarchy-aware prediction sets calibrated by conformal risk control.
//!
//! For a probability row with point prediction `yhat`, the candidate sets
//! are indexed by a threshold `lambda` in `[0, 1]` and built from the
//! ancestors of `yhat`:
//!
//! * the **anchor** is the lowest-scoring ancestor whose node score reaches
//!   `lambda` (ties broken toward fewer leaves, then by name); its leaf set
//!   seeds the prediction set;
//! * every ancestor whose score is at most `lambda` contributes its leaves
//!   to the union as well;
//! * if no ancestor reaches `lambda`, the set falls back to all classes.
//!
//! Both comparisons are inclusive, which makes the family nested: raising
//! `lambda` never removes a class. Calibration chooses the smallest
//! `lambda_hat` whose empirical miscoverage on the calibration batch stays
//! within `alpha - (b - alpha) / n`, the tightened level that buys the
//! finite-sample risk guarantee on exchangeable data. A perfectly accurate
//! classifier calibrates to `lambda_hat = 0` (singletons); `lambda_hat = 1`
//! (every class) is the always-valid fallback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::NodeId;
use crate::scores::{argmax_first, ClassMap, LabeledBatch, ProbMatrix, ScoreError};
use crate::sets::PredictionSet;

#[derive(Debug, Error, PartialEq)]
pub enum CrcError {
    #[error("alpha must be strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),
    #[error("loss bound must be at least 1 for miscoverage, got {0}")]
    InvalidLossBound(f64),
    #[error(
        "risk bound unachievable at alpha = {alpha} with loss bound {b}: \
         need alpha - (b - alpha) / n > 0 but n = {n}"
    )]
    BoundUnachievable { alpha: f64, b: f64, n: usize },
    #[error("row index {row} out of range for {n} rows")]
    RowOutOfRange { row: usize, n: usize },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Result of conformal risk-control calibration over a label hierarchy.
///
/// Alongside `lambda_hat` it stores each calibration point's critical
/// threshold — the `lambda` where that point's true label first enters the
/// set — split by whether coverage holds *at* the threshold (`closed`) or
/// only strictly above it (`open`). Those two sorted lists make the
/// empirical risk exactly evaluable at any `lambda` after the fact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaCalibration {
    lambda_hat: f64,
    alpha: f64,
    b: f64,
    n: usize,
    class_names: Vec<String>,
    closed_crits: Vec<f64>,
    open_crits: Vec<f64>,
    risk_curve: Vec<(f64, f64)>,
}

/// Miscoverage loss of a prediction set: 1 when the true class column is
/// absent, 0 when present.
#[inline]
pub fn miscoverage_loss(set: &PredictionSet, true_col: u32) -> f64 {
    if set.contains(true_col) {
        0.0
    } else {
        1.0
    }
}

/// Name-based miscoverage loss, resolving the label against `class_names`.
pub fn miscoverage_loss_by_name(
    set: &PredictionSet,
    class_names: &[String],
    label: &str,
) -> Result<f64, ScoreError> {
    let col = class_names
        .iter()
        .position(|c| c == label)
        .ok_or_else(|| ScoreError::LabelNotInClasses(label.to_string()))?;
    Ok(miscoverage_loss(set, col as u32))
}

/// Orders anchor candidates: lower score first, then fewer leaves, then
/// lexicographically smaller node name. Shared by set construction and
/// calibration so both resolve ties identically.
#[inline]
fn anchor_precedes(map: &ClassMap, a: (NodeId, f64), b: (NodeId, f64)) -> bool {
    let (va, sa) = a;
    let (vb, sb) = b;
    if sa != sb {
        return sa < sb;
    }
    let (la, lb) = (map.node_classes(va).len(), map.node_classes(vb).len());
    if la != lb {
        return la < lb;
    }
    map.graph().name(va) < map.graph().name(vb)
}

/// Builds the prediction set for row `i` at threshold `lambda`.
pub fn graph_set(
    map: &ClassMap,
    probs: &ProbMatrix,
    i: usize,
    lambda: f64,
) -> Result<PredictionSet, CrcError> {
    map.check_probs(probs)?;
    if i >= probs.n_rows() {
        return Err(CrcError::RowOutOfRange { row: i, n: probs.n_rows() });
    }
    let mut member = vec![false; map.n_classes()];
    let set = graph_set_unchecked(map, probs.row(i), lambda, &mut member);
    Ok(set)
}

/// Set construction on a raw row with a caller-provided membership scratch
/// (`member` must be all-false on entry and is reset before returning).
fn graph_set_unchecked(
    map: &ClassMap,
    row: &[f64],
    lambda: f64,
    member: &mut [bool],
) -> PredictionSet {
    let yhat = argmax_first(row);
    let mut anchor: Option<(NodeId, f64)> = None;
    for &a in map.class_ancestors(yhat) {
        let score = map.node_score(row, a);
        if score <= lambda {
            for &c in map.node_classes(a) {
                member[c as usize] = true;
            }
        }
        if score >= lambda {
            match anchor {
                Some(best) if !anchor_precedes(map, (a, score), best) => {}
                _ => anchor = Some((a, score)),
            }
        }
    }
    // No ancestor reaches lambda only when even the root's score falls
    // short; the set then widens to the whole label space.
    let anchor_node = anchor.map(|(v, _)| v).unwrap_or_else(|| map.graph().root());
    for &c in map.node_classes(anchor_node) {
        member[c as usize] = true;
    }
    let classes: Vec<u32> = (0..member.len() as u32).filter(|&c| member[c as usize]).collect();
    for c in &classes {
        member[*c as usize] = false;
    }
    PredictionSet::from_classes(classes).with_anchor(anchor_node)
}

/// Critical threshold of one calibration point: the `lambda` at which its
/// true label first belongs to the set, plus whether coverage already
/// holds at that value (`closed`) or only strictly above it (`open`).
///
/// Because the sets are nested in `lambda`, the covered region is an
/// up-interval; its boundary is determined by the ancestors of the point
/// prediction alone. Let `m` be the smallest score among ancestors whose
/// leaf set contains the true label ("covering" ancestors; the root always
/// qualifies). Coverage via the union clause starts exactly at `m`. The
/// anchor clause can only help earlier if the tie-break winner among *all*
/// ancestors scoring exactly `m` is itself covering — then coverage starts
/// just above the next ancestor score below `m` (open), or at 0 when no
/// ancestor scores lower.
fn critical_value(map: &ClassMap, row: &[f64], true_col: u32) -> (f64, bool) {
    let yhat = argmax_first(row);
    let mut m = f64::INFINITY;
    for &a in map.class_ancestors(yhat) {
        if map.node_covers(a, true_col) {
            let score = map.node_score(row, a);
            if score < m {
                m = score;
            }
        }
    }
    debug_assert!(m.is_finite(), "the root covers every class");

    let mut winner: Option<(NodeId, f64)> = None;
    let mut below: Option<f64> = None;
    for &a in map.class_ancestors(yhat) {
        let score = map.node_score(row, a);
        if score == m {
            match winner {
                Some(best) if !anchor_precedes(map, (a, score), best) => {}
                _ => winner = Some((a, score)),
            }
        } else if score < m && below.is_none_or(|b| score > b) {
            below = Some(score);
        }
    }
    let winner_covers =
        winner.map(|(v, _)| map.node_covers(v, true_col)).expect("some ancestor scores m");
    if winner_covers {
        match below {
            None => (0.0, true),
            Some(prev) => (prev, false),
        }
    } else {
        (m, true)
    }
}

/// Calibrates `lambda_hat` on a labeled batch at miscoverage level `alpha`
/// with loss bound `b` (1 for plain miscoverage).
pub fn calibrate(
    map: &ClassMap,
    batch: &LabeledBatch,
    alpha: f64,
    b: f64,
) -> Result<LambdaCalibration, CrcError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CrcError::InvalidAlpha(alpha));
    }
    if !(b >= 1.0) {
        return Err(CrcError::InvalidLossBound(b));
    }
    map.check_probs(batch.probs())?;
    let n = batch.n();
    let bound = if n == 0 { -1.0 } else { alpha - (b - alpha) / n as f64 };
    if bound <= 0.0 {
        return Err(CrcError::BoundUnachievable { alpha, b, n });
    }

    let mut closed_crits = Vec::new();
    let mut open_crits = Vec::new();
    for i in 0..n {
        let (crit, closed) = critical_value(map, batch.probs().row(i), batch.label_col(i));
        if closed {
            closed_crits.push(crit);
        } else {
            open_crits.push(crit);
        }
    }
    closed_crits.sort_by(|a, b| a.total_cmp(b));
    open_crits.sort_by(|a, b| a.total_cmp(b));

    // Candidate thresholds: every critical value plus the endpoints. The
    // empirical risk is a step function that only changes at critical
    // values, so the smallest candidate satisfying the bound is the
    // infimum over all achievable thresholds.
    let mut candidates: Vec<f64> = Vec::with_capacity(n + 2);
    candidates.push(0.0);
    candidates.extend_from_slice(&closed_crits);
    candidates.extend_from_slice(&open_crits);
    candidates.push(1.0);
    candidates.sort_by(|a, b| a.total_cmp(b));
    candidates.dedup();

    let risk = |lambda: f64| risk_from_crits(&closed_crits, &open_crits, n, lambda);
    let lambda_hat = candidates.iter().copied().find(|&c| risk(c) <= bound).unwrap_or(1.0);
    let risk_curve: Vec<(f64, f64)> = candidates.iter().map(|&c| (c, risk(c))).collect();

    Ok(LambdaCalibration {
        lambda_hat,
        alpha,
        b,
        n,
        class_names: batch.probs().class_names().to_vec(),
        closed_crits,
        open_crits,
        risk_curve,
    })
}

/// Exact empirical risk at `lambda` from the sorted critical values: a
/// closed point misses while `lambda` is below its critical value, an open
/// point misses at the critical value as well.
fn risk_from_crits(closed: &[f64], open: &[f64], n: usize, lambda: f64) -> f64 {
    let closed_hits = closed.partition_point(|&c| c <= lambda);
    let open_hits = open.partition_point(|&c| c < lambda);
    ((closed.len() - closed_hits) + (open.len() - open_hits)) as f64 / n as f64
}

impl LambdaCalibration {
    #[inline]
    pub fn lambda_hat(&self) -> f64 {
        self.lambda_hat
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    #[inline]
    pub fn loss_bound(&self) -> f64 {
        self.b
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// The tightened risk level the calibration had to meet.
    #[inline]
    pub fn bound(&self) -> f64 {
        self.alpha - (self.b - self.alpha) / self.n as f64
    }

    /// Empirical calibration risk at an arbitrary threshold.
    pub fn risk_at(&self, lambda: f64) -> f64 {
        risk_from_crits(&self.closed_crits, &self.open_crits, self.n, lambda)
    }

    /// `(lambda, empirical risk)` at every candidate threshold, ascending
    /// in `lambda` (and therefore non-increasing in risk).
    #[inline]
    pub fn risk_curve(&self) -> &[(f64, f64)] {
        &self.risk_curve
    }

    /// Prediction set for row `i` at the calibrated threshold.
    pub fn predict_set(&self, map: &ClassMap, probs: &ProbMatrix, i: usize) -> Result<PredictionSet, CrcError> {
        self.check_classes(map)?;
        graph_set(map, probs, i, self.lambda_hat)
    }

    /// Prediction sets for every row of `probs`.
    pub fn predict_all(&self, map: &ClassMap, probs: &ProbMatrix) -> Result<Vec<PredictionSet>, CrcError> {
        self.check_classes(map)?;
        map.check_probs(probs)?;
        let mut member = vec![false; map.n_classes()];
        Ok((0..probs.n_rows())
            .map(|i| graph_set_unchecked(map, probs.row(i), self.lambda_hat, &mut member))
            .collect())
    }

    fn check_classes(&self, map: &ClassMap) -> Result<(), CrcError> {
        if map.class_names() != self.class_names.as_slice() {
            return Err(CrcError::Score(ScoreError::GraphClassMismatch(
                "calibration classes differ from the bound graph leaves".into(),
            )));
        }
        Ok(())
    }
}
