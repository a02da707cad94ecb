//! Label-shift correction by two-fold resampling.
//!
//! Conformal guarantees assume the calibration and test points are
//! exchangeable. Under label shift — the class marginal moves while the
//! feature law within each class stays put — that assumption fails and
//! coverage drifts. The correction here restores it by reweighting the
//! calibration set to look like the test set:
//!
//! 1. split the test rows into two folds uniformly at random;
//! 2. estimate the test class proportions on one fold from the model's
//!    predicted probabilities;
//! 3. resample the calibration set (with replacement, stratified by class)
//!    to match those proportions, recalibrate, and predict the *other*
//!    fold — then swap the folds and repeat.
//!
//! Using the opposite fold for estimation keeps each prediction
//! independent of its own row's contribution to the proportion estimate.
//! [`oracle_correct`] replaces the estimate with the test set's true label
//! frequencies, providing the benchmark upper bound for evaluation.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crc::{self, CrcError};
use crate::graph::LabelGraph;
use crate::scores::{ClassMap, LabeledBatch, ProbMatrix, ScoreError};
use crate::sets::PredictionSet;
use crate::split::{self, SplitError};

const PROPS_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ShiftError {
    #[error("cannot estimate class proportions from an empty fold")]
    EmptyFold,
    #[error("two-fold correction needs at least 2 test rows, got {0}")]
    TooFewTestRows(usize),
    #[error("invalid proportion vector: {0}")]
    InvalidProps(String),
    #[error("class {0:?} has positive target proportion but no calibration rows")]
    MissingStratum(String),
    #[error("calibration and test matrices disagree on class columns")]
    ClassMismatch,
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Crc(#[from] CrcError),
}

/// Which conformal calibrator the correction wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConformalMethod {
    /// Plain split-conformal sets thresholded on leaf probabilities.
    Split,
    /// Hierarchy-aware sets calibrated by conformal risk control.
    Graph,
}

/// How test class proportions are estimated from model outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropEstimator {
    /// Mean predicted probability per class (default; lower variance).
    #[default]
    Soft,
    /// Frequency of argmax point predictions.
    Hard,
}

/// Audit record of one two-fold correction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftCorrectionPlan {
    /// Fold id (1 or 2) for each test row, in original row order.
    pub fold_assignment: Vec<u8>,
    /// Proportion vector used to correct each fold: entry 0 corrected
    /// fold 1 (estimated from fold 2) and entry 1 corrected fold 2.
    pub estimated_props_per_fold: [Vec<f64>; 2],
    /// Number of resampled calibration rows drawn per class, per fold.
    pub resample_counts_per_fold: [Vec<u64>; 2],
    /// Rows in each resampled calibration batch.
    pub resample_size: usize,
    /// Master seed the fold split and both resamples derive from.
    pub seed: u64,
}

impl ShiftCorrectionPlan {
    /// Number of test rows assigned to folds 1 and 2.
    pub fn fold_sizes(&self) -> (usize, usize) {
        let ones = self.fold_assignment.iter().filter(|&&f| f == 1).count();
        (ones, self.fold_assignment.len() - ones)
    }
}

/// Soft proportion estimate: the mean predicted probability of each class
/// over all rows. Each row sums to 1, so the estimate does too.
pub fn estimate_class_proportions(probs: &ProbMatrix) -> Result<Vec<f64>, ShiftError> {
    mean_over_rows(probs, None)
}

/// Hard proportion estimate: the frequency of each class among the rows'
/// argmax point predictions.
pub fn estimate_class_proportions_hard(probs: &ProbMatrix) -> Result<Vec<f64>, ShiftError> {
    if probs.n_rows() == 0 {
        return Err(ShiftError::EmptyFold);
    }
    let mut counts = vec![0u64; probs.n_classes()];
    for i in 0..probs.n_rows() {
        counts[probs.point_prediction(i).expect("row index in range") as usize] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / probs.n_rows() as f64).collect())
}

/// Column means over a row subset (all rows when `rows` is `None`).
fn mean_over_rows(probs: &ProbMatrix, rows: Option<&[usize]>) -> Result<Vec<f64>, ShiftError> {
    let k = probs.n_classes();
    let mut sums = vec![0.0; k];
    let mut count = 0usize;
    let mut add = |i: usize| {
        for (s, v) in sums.iter_mut().zip(probs.row(i)) {
            *s += v;
        }
        count += 1;
    };
    match rows {
        Some(rows) => rows.iter().for_each(|&i| add(i)),
        None => (0..probs.n_rows()).for_each(add),
    }
    if count == 0 {
        return Err(ShiftError::EmptyFold);
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

fn estimate_over_rows(
    probs: &ProbMatrix,
    rows: &[usize],
    estimator: PropEstimator,
) -> Result<Vec<f64>, ShiftError> {
    match estimator {
        PropEstimator::Soft => mean_over_rows(probs, Some(rows)),
        PropEstimator::Hard => {
            if rows.is_empty() {
                return Err(ShiftError::EmptyFold);
            }
            let mut counts = vec![0u64; probs.n_classes()];
            for &i in rows {
                counts[crate::scores::argmax_first(probs.row(i)) as usize] += 1;
            }
            Ok(counts.iter().map(|&c| c as f64 / rows.len() as f64).collect())
        }
    }
}

fn validate_props(props: &[f64], k: usize) -> Result<(), ShiftError> {
    if props.len() != k {
        return Err(ShiftError::InvalidProps(format!(
            "expected {k} entries, got {}",
            props.len()
        )));
    }
    if props.iter().any(|p| !(*p >= 0.0)) {
        return Err(ShiftError::InvalidProps("entries must be non-negative".into()));
    }
    let total: f64 = props.iter().sum();
    if (total - 1.0).abs() > PROPS_SUM_TOLERANCE {
        return Err(ShiftError::InvalidProps(format!("entries sum to {total}, expected 1")));
    }
    Ok(())
}

/// Resamples a calibration batch to match a target class distribution:
/// class counts are drawn multinomially from `props`, then rows are drawn
/// uniformly with replacement within each class stratum.
pub fn resample_calibration(
    batch: &LabeledBatch,
    props: &[f64],
    size: usize,
    seed: u64,
) -> Result<LabeledBatch, ShiftError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    resample_with(batch, props, size, &mut rng).map(|(b, _)| b)
}

/// Resampling core on a caller-provided RNG; also returns the per-class
/// draw counts for audit.
fn resample_with(
    batch: &LabeledBatch,
    props: &[f64],
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(LabeledBatch, Vec<u64>), ShiftError> {
    let k = batch.probs().n_classes();
    validate_props(props, k)?;

    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..batch.n() {
        strata[batch.label_col(i) as usize].push(i);
    }
    for (c, stratum) in strata.iter().enumerate() {
        if props[c] > 0.0 && stratum.is_empty() {
            return Err(ShiftError::MissingStratum(batch.probs().class_names()[c].clone()));
        }
    }

    let dist = WeightedIndex::new(props)
        .map_err(|e| ShiftError::InvalidProps(e.to_string()))?;
    let mut counts = vec![0u64; k];
    for _ in 0..size {
        counts[dist.sample(rng)] += 1;
    }

    let probs = batch.probs();
    let mut data = Vec::with_capacity(size * k);
    let mut label_cols = Vec::with_capacity(size);
    for (c, &count) in counts.iter().enumerate() {
        let stratum = &strata[c];
        for _ in 0..count {
            let row = stratum[rng.gen_range(0..stratum.len())];
            data.extend_from_slice(probs.row(row));
            label_cols.push(c as u32);
        }
    }
    let matrix = ProbMatrix::new(probs.class_names().to_vec(), data)?;
    Ok((LabeledBatch::from_cols(matrix, label_cols), counts))
}

/// Two-fold label-shift correction: proportions for each test fold are
/// estimated (softly) from the other fold, the calibration set is
/// resampled to match, and the fold is predicted with the recalibrated
/// `method`. Returns prediction sets in original test-row order plus the
/// audit plan.
pub fn two_fold_correct(
    graph: &LabelGraph,
    calib: &LabeledBatch,
    test_probs: &ProbMatrix,
    alpha: f64,
    method: ConformalMethod,
    seed: u64,
) -> Result<(Vec<PredictionSet>, ShiftCorrectionPlan), ShiftError> {
    two_fold_correct_with(graph, calib, test_probs, alpha, method, PropEstimator::Soft, seed)
}

/// [`two_fold_correct`] with an explicit proportion estimator.
pub fn two_fold_correct_with(
    graph: &LabelGraph,
    calib: &LabeledBatch,
    test_probs: &ProbMatrix,
    alpha: f64,
    method: ConformalMethod,
    estimator: PropEstimator,
    seed: u64,
) -> Result<(Vec<PredictionSet>, ShiftCorrectionPlan), ShiftError> {
    corrected_sets(graph, calib, test_probs, alpha, method, seed, |other_rows| {
        estimate_over_rows(test_probs, other_rows, estimator)
    })
}

/// Oracle correction: identical machinery, but both folds are resampled
/// to the test set's *true* label frequencies. Evaluation-only — it is
/// the ceiling the estimated correction is compared against.
pub fn oracle_correct(
    graph: &LabelGraph,
    calib: &LabeledBatch,
    test: &LabeledBatch,
    alpha: f64,
    method: ConformalMethod,
    seed: u64,
) -> Result<Vec<PredictionSet>, ShiftError> {
    let k = test.probs().n_classes();
    let mut counts = vec![0u64; k];
    for i in 0..test.n() {
        counts[test.label_col(i) as usize] += 1;
    }
    let props: Vec<f64> = counts.iter().map(|&c| c as f64 / test.n() as f64).collect();
    let (sets, _) =
        corrected_sets(graph, calib, test.probs(), alpha, method, seed, |_| Ok(props.clone()))?;
    Ok(sets)
}

/// Shared fold-split / resample / recalibrate / predict pipeline.
/// `props_for` receives the *other* fold's row indices and returns the
/// target proportions for the fold being predicted.
fn corrected_sets(
    graph: &LabelGraph,
    calib: &LabeledBatch,
    test_probs: &ProbMatrix,
    alpha: f64,
    method: ConformalMethod,
    seed: u64,
    props_for: impl Fn(&[usize]) -> Result<Vec<f64>, ShiftError>,
) -> Result<(Vec<PredictionSet>, ShiftCorrectionPlan), ShiftError> {
    let n_test = test_probs.n_rows();
    if n_test < 2 {
        return Err(ShiftError::TooFewTestRows(n_test));
    }
    if calib.probs().class_names() != test_probs.class_names() {
        return Err(ShiftError::ClassMismatch);
    }

    // Uniformly random balanced partition: stream 0 of the master seed.
    let mut order: Vec<usize> = (0..n_test).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let cut = n_test.div_ceil(2);
    let folds: [&[usize]; 2] = [&order[..cut], &order[cut..]];

    let mut fold_assignment = vec![0u8; n_test];
    for (f, rows) in folds.iter().enumerate() {
        for &i in *rows {
            fold_assignment[i] = f as u8 + 1;
        }
    }

    let map = match method {
        ConformalMethod::Graph => Some(ClassMap::new(graph, calib.probs().class_names())?),
        ConformalMethod::Split => None,
    };

    let mut sets: Vec<Option<PredictionSet>> = vec![None; n_test];
    let mut props_per_fold: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut counts_per_fold: Vec<Vec<u64>> = Vec::with_capacity(2);
    let resample_size = calib.n();

    for f in 0..2 {
        let props = props_for(folds[1 - f])?;
        // Each fold resamples on its own RNG stream so the folds stay
        // independent and order-insensitive.
        let mut fold_rng = ChaCha8Rng::seed_from_u64(seed);
        fold_rng.set_stream(f as u64 + 1);
        let (resampled, counts) = resample_with(calib, &props, resample_size, &mut fold_rng)?;

        match (&map, method) {
            (Some(map), ConformalMethod::Graph) => {
                let cal = crc::calibrate(map, &resampled, alpha, 1.0)?;
                for &i in folds[f] {
                    sets[i] = Some(cal.predict_set(map, test_probs, i)?);
                }
            }
            _ => {
                let cal = split::calibrate(&resampled, alpha)?;
                for &i in folds[f] {
                    sets[i] = Some(cal.predict_set(test_probs, i)?);
                }
            }
        }
        props_per_fold.push(props);
        counts_per_fold.push(counts);
    }

    let plan = ShiftCorrectionPlan {
        fold_assignment,
        estimated_props_per_fold: [props_per_fold.remove(0), props_per_fold.remove(0)],
        resample_counts_per_fold: [counts_per_fold.remove(0), counts_per_fold.remove(0)],
        resample_size,
        seed,
    };
    let sets = sets.into_iter().map(|s| s.expect("every row falls in a fold")).collect();
    Ok((sets, plan))
}
