//! Split conformal calibration for flat (hierarchy-free) prediction sets.
//!
//! Given a calibration batch scored by an arbitrary fixed classifier, the
//! `ceil((1 - alpha) * (n + 1))`-th smallest conformity score becomes the
//! threshold `q_hat`. A new observation's prediction set is every class
//! whose predicted probability is at least `1 - q_hat`. When calibration
//! and test data are exchangeable, the true class lands in the set with
//! probability at least `1 - alpha`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scores::{LabeledBatch, ProbMatrix};
use crate::sets::PredictionSet;

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("alpha must be strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),
    #[error("calibration too small: quantile index {needed} exceeds n = {n}")]
    CalibrationTooSmall { needed: usize, n: usize },
    #[error("row index {row} out of range for {n} rows")]
    RowOutOfRange { row: usize, n: usize },
    #[error("probability matrix class columns differ from the calibration classes")]
    ClassMismatch,
}

/// Result of split-conformal calibration.
///
/// Keeps the full sorted score vector: it is cheap at calibration scale and
/// lets diagnostics re-derive the threshold for any other level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitCalibration {
    q_hat: f64,
    alpha: f64,
    n: usize,
    class_names: Vec<String>,
    sorted_scores: Vec<f64>,
}

/// Conformal quantile index `ceil((1 - alpha) * (n + 1))`, evaluated with a
/// guard against floating-point noise right at integer boundaries.
pub(crate) fn quantile_index(alpha: f64, n: usize) -> usize {
    let raw = (1.0 - alpha) * (n as f64 + 1.0);
    let nearest = raw.round();
    if (raw - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        raw.ceil() as usize
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<(), SplitError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SplitError::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Calibrates the score threshold on a labeled batch.
pub fn calibrate(batch: &LabeledBatch, alpha: f64) -> Result<SplitCalibration, SplitError> {
    check_alpha(alpha)?;
    let n = batch.n();
    let k = quantile_index(alpha, n);
    if k > n {
        return Err(SplitError::CalibrationTooSmall { needed: k, n });
    }
    let mut sorted_scores = batch.conformal_scores();
    sorted_scores.sort_by(|a, b| a.total_cmp(b));
    Ok(SplitCalibration {
        q_hat: sorted_scores[k - 1],
        alpha,
        n,
        class_names: batch.probs().class_names().to_vec(),
        sorted_scores,
    })
}

impl SplitCalibration {
    #[inline]
    pub fn q_hat(&self) -> f64 {
        self.q_hat
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    #[inline]
    pub fn sorted_scores(&self) -> &[f64] {
        &self.sorted_scores
    }

    /// Prediction set for row `i`: all classes with probability at least
    /// `1 - q_hat` (boundary included). May be empty.
    pub fn predict_set(&self, probs: &ProbMatrix, i: usize) -> Result<PredictionSet, SplitError> {
        if probs.class_names() != self.class_names.as_slice() {
            return Err(SplitError::ClassMismatch);
        }
        if i >= probs.n_rows() {
            return Err(SplitError::RowOutOfRange { row: i, n: probs.n_rows() });
        }
        let threshold = 1.0 - self.q_hat;
        let classes = probs
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= threshold)
            .map(|(c, _)| c as u32)
            .collect();
        Ok(PredictionSet::from_classes(classes))
    }

    /// Prediction sets for every row of `probs`.
    pub fn predict_all(&self, probs: &ProbMatrix) -> Result<Vec<PredictionSet>, SplitError> {
        (0..probs.n_rows()).map(|i| self.predict_set(probs, i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn two_class_batch(scores: &[f64]) -> LabeledBatch {
        // p(true) = 1 - s on column 0, so the conformity score of each row
        // is exactly s.
        let names = vec!["a".to_string(), "b".to_string()];
        let data: Vec<f64> = scores.iter().flat_map(|&s| [1.0 - s, s]).collect();
        let probs = ProbMatrix::new(names, data).unwrap();
        LabeledBatch::new(probs, &vec!["a"; scores.len()]).unwrap()
    }

    #[test]
    fn quantile_index_matches_hand_arithmetic() {
        assert_eq!(quantile_index(0.1, 1000), 901);
        assert_eq!(quantile_index(0.1, 9), 9);
        assert_eq!(quantile_index(0.1, 5), 6);
        assert_eq!(quantile_index(0.5, 3), 2);
        assert_eq!(quantile_index(0.05, 99), 95);
    }

    #[test]
    fn nine_points_take_the_maximum_score() {
        let scores: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let cal = calibrate(&two_class_batch(&scores), 0.1).unwrap();
        assert_eq!(cal.q_hat(), 0.9);
        assert_eq!(cal.n(), 9);
    }

    #[test]
    fn thousand_points_take_the_901st_order_statistic() {
        let mut scores: Vec<f64> = (1..=1000).map(|i| i as f64 / 1000.0).collect();
        // Shuffle so the order statistic is doing real work.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        scores.shuffle(&mut rng);
        let cal = calibrate(&two_class_batch(&scores), 0.1).unwrap();
        assert!((cal.q_hat() - 0.901).abs() < 1e-12);
        // Independent order-statistic check: q_hat is the smallest score
        // with at least 901 scores <= it.
        let count = scores.iter().filter(|&&s| s <= cal.q_hat()).count();
        assert!(count >= 901);
        let just_below = cal.q_hat() - 1e-9;
        assert!(scores.iter().filter(|&&s| s <= just_below).count() < 901);
    }

    #[test]
    fn five_points_at_ten_percent_is_infeasible() {
        let scores = [0.1, 0.2, 0.3, 0.4, 0.5];
        let err = calibrate(&two_class_batch(&scores), 0.1).unwrap_err();
        assert_eq!(err, SplitError::CalibrationTooSmall { needed: 6, n: 5 });
    }

    #[test]
    fn alpha_domain_is_open_unit_interval() {
        let batch = two_class_batch(&[0.1, 0.2, 0.3]);
        for alpha in [0.0, 1.0, -0.2, 1.7, f64::NAN] {
            assert!(matches!(calibrate(&batch, alpha), Err(SplitError::InvalidAlpha(_))));
        }
    }

    #[test]
    fn predict_set_thresholds_inclusively() {
        let scores: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let cal = calibrate(&two_class_batch(&scores), 0.5).unwrap();
        // k = ceil(0.5 * 10) = 5 -> q_hat = 0.5, threshold 0.5.
        assert_eq!(cal.q_hat(), 0.5);
        let names = vec!["a".to_string(), "b".to_string()];
        let probs = ProbMatrix::new(names, vec![0.7, 0.3, 0.5, 0.5, 0.4, 0.6]).unwrap();
        assert_eq!(cal.predict_set(&probs, 0).unwrap().classes(), &[0]);
        // Boundary probabilities are kept.
        assert_eq!(cal.predict_set(&probs, 1).unwrap().classes(), &[0, 1]);
        assert_eq!(cal.predict_set(&probs, 2).unwrap().classes(), &[1]);
    }

    #[test]
    fn predict_set_can_be_empty() {
        let cal = calibrate(&two_class_batch(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), 0.1).unwrap();
        assert_eq!(cal.q_hat(), 0.0);
        let names = vec!["a".to_string(), "b".to_string()];
        let probs = ProbMatrix::new(names, vec![0.6, 0.4]).unwrap();
        let set = cal.predict_set(&probs, 0).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn predict_rejects_mismatched_classes_and_rows() {
        let cal = calibrate(&two_class_batch(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]), 0.2).unwrap();
        let other = ProbMatrix::new(vec!["x".into(), "y".into()], vec![0.5, 0.5]).unwrap();
        assert_eq!(cal.predict_set(&other, 0), Err(SplitError::ClassMismatch));
        let names = vec!["a".to_string(), "b".to_string()];
        let probs = ProbMatrix::new(names, vec![0.5, 0.5]).unwrap();
        assert!(matches!(cal.predict_set(&probs, 5), Err(SplitError::RowOutOfRange { .. })));
    }

    /// Small-scale check of the coverage guarantee: with exchangeable
    /// uniform scores, expected coverage is ceil(0.9 * 100) / 100 = 0.90.
    #[test]
    fn empirical_coverage_tracks_the_guarantee() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 200;
        let mut total = 0.0;
        for _ in 0..trials {
            let calib: Vec<f64> = (0..99).map(|_| rng.gen::<f64>()).collect();
            let cal = calibrate(&two_class_batch(&calib), 0.1).unwrap();
            let covered = (0..200).filter(|_| rng.gen::<f64>() <= cal.q_hat()).count();
            total += covered as f64 / 200.0;
        }
        let mean = total / trials as f64;
        assert!((mean - 0.9).abs() < 0.02, "mean coverage {mean}");
    }

    #[test]
    fn calibration_round_trips_through_json() {
        let cal = calibrate(&two_class_batch(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]), 0.2).unwrap();
        let text = serde_json::to_string(&cal).unwrap();
        let back: SplitCalibration = serde_json::from_str(&text).unwrap();
        assert_eq!(back.q_hat(), cal.q_hat());
        assert_eq!(back.n(), cal.n());
        assert_eq!(back.class_names(), cal.class_names());
    }
}
