//! Built-in multinomial logit (softmax regression) classifier.
//!
//! The conformal machinery consumes probability matrices from any source;
//! this module provides a self-contained way to produce them from numeric
//! features so the full pipeline — select features, fit, predict,
//! calibrate, evaluate — runs without external model tooling.
//!
//! The model is intentionally plain: top-k-variance feature selection,
//! internal standardization (constant features dropped), and full-batch
//! gradient descent with Armijo backtracking on the L2-regularized
//! multinomial negative log-likelihood. Gradients reduce over fixed-size
//! row chunks that are folded in a fixed order, so results are bit-stable
//! across thread counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scores::{ProbMatrix, ScoreError};

/// Rows per parallel gradient chunk. Fixed — not derived from the thread
/// count — so the reduction tree and therefore the floating-point result
/// never depend on parallelism.
const CHUNK_ROWS: usize = 256;

/// Armijo sufficient-decrease constant.
const ARMIJO_C: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("feature matrix must have at least one feature")]
    EmptyFeatures,
    #[error("duplicate feature name {0:?}")]
    DuplicateFeature(String),
    #[error("data length {got} is not a multiple of the {features} features")]
    RaggedData { got: usize, features: usize },
    #[error("non-finite value at row {row}, feature {feature:?}")]
    NonFiniteInput { row: usize, feature: String },
    #[error("{what}: expected {expected}, got {got}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("cannot select {k} of {p} features")]
    KTooLarge { k: usize, p: usize },
    #[error("training labels contain a single class; need at least two")]
    SingleClass,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("feature {0:?} required by the model is missing")]
    MissingFeature(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Dense row-major numeric feature matrix with named columns.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    feature_names: Vec<String>,
    ids: Option<Vec<String>>,
    data: Vec<f64>,
    n_rows: usize,
}

impl FeatureMatrix {
    pub fn new(feature_names: Vec<String>, data: Vec<f64>) -> Result<Self, ClassifierError> {
        let p = feature_names.len();
        if p == 0 {
            return Err(ClassifierError::EmptyFeatures);
        }
        for (i, name) in feature_names.iter().enumerate() {
            if feature_names[..i].contains(name) {
                return Err(ClassifierError::DuplicateFeature(name.clone()));
            }
        }
        if data.len() % p != 0 {
            return Err(ClassifierError::RaggedData { got: data.len(), features: p });
        }
        let n_rows = data.len() / p;
        for (pos, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(ClassifierError::NonFiniteInput {
                    row: pos / p,
                    feature: feature_names[pos % p].clone(),
                });
            }
        }
        Ok(Self { feature_names, ids: None, data, n_rows })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self, ClassifierError> {
        if ids.len() != self.n_rows {
            return Err(ClassifierError::LengthMismatch {
                what: "row ids",
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
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    #[inline]
    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    #[inline]
    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.feature_names.len();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Copy of this matrix restricted to the named features, in the given
    /// order. Row ids are preserved.
    pub fn select_features(&self, names: &[String]) -> Result<FeatureMatrix, ClassifierError> {
        let cols: Vec<usize> = names
            .iter()
            .map(|f| self.feature_index(f).ok_or_else(|| ClassifierError::MissingFeature(f.clone())))
            .collect::<Result<_, _>>()?;
        let mut data = Vec::with_capacity(self.n_rows * cols.len());
        for i in 0..self.n_rows {
            let row = self.row(i);
            data.extend(cols.iter().map(|&j| row[j]));
        }
        let matrix = FeatureMatrix::new(names.to_vec(), data)?;
        match &self.ids {
            Some(ids) => matrix.with_ids(ids.clone()),
            None => Ok(matrix),
        }
    }

    /// Sample variance of one feature column (0 for fewer than 2 rows).
    fn column_variance(&self, j: usize) -> f64 {
        if self.n_rows < 2 {
            return 0.0;
        }
        let p = self.feature_names.len();
        let mean: f64 =
            (0..self.n_rows).map(|i| self.data[i * p + j]).sum::<f64>() / self.n_rows as f64;
        let ss: f64 = (0..self.n_rows)
            .map(|i| {
                let d = self.data[i * p + j] - mean;
                d * d
            })
            .sum();
        ss / (self.n_rows - 1) as f64
    }
}

/// Names of the `k` features with the largest sample variance, ordered by
/// descending variance with ties broken by ascending name.
pub fn select_top_variance(x: &FeatureMatrix, k: usize) -> Result<Vec<String>, ClassifierError> {
    let p = x.n_features();
    if k == 0 || k > p {
        return Err(ClassifierError::KTooLarge { k, p });
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        x.column_variance(b)
            .total_cmp(&x.column_variance(a))
            .then_with(|| x.feature_names[a].cmp(&x.feature_names[b]))
    });
    Ok(order[..k].iter().map(|&j| x.feature_names[j].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Accepted gradient steps.
    pub iterations: usize,
    pub final_objective: f64,
    /// True when the gradient max-norm fell below tolerance.
    pub converged: bool,
    /// Objective after each accepted step (non-increasing by the Armijo
    /// acceptance rule).
    pub objective_trace: Vec<f64>,
}

/// A fitted multinomial logit model.
///
/// Stores standardization constants alongside the weights, so prediction
/// reproduces training preprocessing exactly. Serializes to JSON for
/// persistence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitModel {
    /// K rows of p'+1 weights; column 0 is the intercept, the rest align
    /// with `selected_features`.
    weights: Vec<Vec<f64>>,
    /// Features the model consumes, in weight-column order. Constant
    /// training features are dropped before fitting and never appear.
    selected_features: Vec<String>,
    /// Class labels in output-column order (lexicographic).
    classes: Vec<String>,
    /// Per-feature training means, aligned with `selected_features`.
    means: Vec<f64>,
    /// Per-feature training standard deviations (population), same order.
    sds: Vec<f64>,
    l2: f64,
    training_log: TrainingLog,
}

/// Standardized design matrix plus encoded labels, ready for optimization.
struct Design {
    x: Vec<f64>,
    labels: Vec<u32>,
    n: usize,
    p: usize,
    k: usize,
}

/// Fits a multinomial logit by full-batch gradient descent with Armijo
/// backtracking. The objective is the mean negative log-likelihood plus
/// `l2/2` times the squared norm of the non-intercept weights. Stops when
/// the gradient max-norm drops below `tol` or after `max_iter` accepted
/// steps. Features are standardized internally and constant features are
/// dropped.
pub fn fit_logit<S: AsRef<str>>(
    x: &FeatureMatrix,
    labels: &[S],
    l2: f64,
    max_iter: usize,
    tol: f64,
) -> Result<LogitModel, ClassifierError> {
    if labels.len() != x.n_rows() {
        return Err(ClassifierError::LengthMismatch {
            what: "labels",
            got: labels.len(),
            expected: x.n_rows(),
        });
    }
    if !(l2 >= 0.0) || !l2.is_finite() {
        return Err(ClassifierError::InvalidHyper(format!("l2 must be finite >= 0, got {l2}")));
    }
    if !(tol > 0.0) {
        return Err(ClassifierError::InvalidHyper(format!("tol must be > 0, got {tol}")));
    }
    if max_iter == 0 {
        return Err(ClassifierError::InvalidHyper("max_iter must be >= 1".into()));
    }

    let mut classes: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(ClassifierError::SingleClass);
    }
    let k = classes.len();
    let n = x.n_rows();
    let label_cols: Vec<u32> = labels
        .iter()
        .map(|l| classes.binary_search_by(|c| c.as_str().cmp(l.as_ref())).unwrap() as u32)
        .collect();

    // Standardize, keeping only features with positive spread.
    let mut kept = Vec::new();
    let mut means = Vec::new();
    let mut sds = Vec::new();
    let p_all = x.n_features();
    for j in 0..p_all {
        let mean: f64 = (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64;
        let var: f64 = (0..n).map(|i| (x.row(i)[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 0.0 {
            kept.push(j);
            means.push(mean);
            sds.push(sd);
        }
    }
    let p = kept.len();
    let mut std_x = Vec::with_capacity(n * p);
    for i in 0..n {
        let row = x.row(i);
        for (idx, &j) in kept.iter().enumerate() {
            std_x.push((row[j] - means[idx]) / sds[idx]);
        }
    }
    let design = Design { x: std_x, labels: label_cols, n, p, k };

    let mut w = vec![0.0; k * (p + 1)];
    let (mut obj, mut grad) = objective_and_grad(&design, &w, l2);
    let mut trace = Vec::new();
    let mut step: f64 = 1.0;
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..max_iter {
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < tol {
            converged = true;
            break;
        }
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        step = (step * 2.0).min(1e6);
        let mut accepted = false;
        while step > 1e-20 {
            let w_try: Vec<f64> = w.iter().zip(&grad).map(|(wi, gi)| wi - step * gi).collect();
            let (obj_try, grad_try) = objective_and_grad(&design, &w_try, l2);
            if obj_try <= obj - ARMIJO_C * step * g2 {
                w = w_try;
                obj = obj_try;
                grad = grad_try;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Line search exhausted: the gradient is numerically flat.
            break;
        }
        iterations += 1;
        trace.push(obj);
    }
    if !converged {
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        converged = gmax < tol;
    }

    let weights: Vec<Vec<f64>> =
        (0..k).map(|c| w[c * (p + 1)..(c + 1) * (p + 1)].to_vec()).collect();
    Ok(LogitModel {
        weights,
        selected_features: kept.iter().map(|&j| x.feature_names()[j].clone()).collect(),
        classes,
        means,
        sds,
        l2,
        training_log: TrainingLog {
            iterations,
            final_objective: obj,
            converged,
            objective_trace: trace,
        },
    })
}

/// Mean negative log-likelihood plus ridge, and its gradient, at `w`
/// (flattened K × (p+1), intercept first per class).
///
/// Rows are processed in fixed chunks reduced in index order, so the sum
/// is identical no matter how many threads execute the chunks.
fn objective_and_grad(design: &Design, w: &[f64], l2: f64) -> (f64, Vec<f64>) {
    let Design { x, labels, n, p, k } = design;
    let (n, p, k) = (*n, *p, *k);
    let stride = p + 1;

    let n_chunks = n.div_ceil(CHUNK_ROWS).max(1);
    let parts: Vec<(f64, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * CHUNK_ROWS;
            let hi = (lo + CHUNK_ROWS).min(n);
            let mut nll = 0.0;
            let mut grad = vec![0.0; k * stride];
            let mut z = vec![0.0; k];
            for i in lo..hi {
                let row = &x[i * p..(i + 1) * p];
                for (c, zc) in z.iter_mut().enumerate() {
                    let wc = &w[c * stride..(c + 1) * stride];
                    let mut acc = wc[0];
                    for (j, &v) in row.iter().enumerate() {
                        acc += wc[j + 1] * v;
                    }
                    *zc = acc;
                }
                let zmax = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = zmax + z.iter().map(|&v| (v - zmax).exp()).sum::<f64>().ln();
                let y = labels[i] as usize;
                nll += lse - z[y];
                for c in 0..k {
                    let r = (z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
                    let gc = &mut grad[c * stride..(c + 1) * stride];
                    gc[0] += r;
                    for (j, &v) in row.iter().enumerate() {
                        gc[j + 1] += r * v;
                    }
                }
            }
            (nll, grad)
        })
        .collect();

    let mut nll = 0.0;
    let mut grad = vec![0.0; k * stride];
    for (part_nll, part_grad) in parts {
        nll += part_nll;
        for (g, pg) in grad.iter_mut().zip(&part_grad) {
            *g += pg;
        }
    }

    let inv_n = 1.0 / n as f64;
    nll *= inv_n;
    let mut ridge = 0.0;
    for c in 0..k {
        for j in 1..stride {
            let wi = w[c * stride + j];
            ridge += wi * wi;
            grad[c * stride + j] = grad[c * stride + j] * inv_n + l2 * wi;
        }
        grad[c * stride] *= inv_n;
    }
    (nll + 0.5 * l2 * ridge, grad)
}

/// Training objective — the ridge-regularized multinomial negative
/// log-likelihood — and its gradient at an arbitrary weight vector.
///
/// `x` is a flattened row-major `n × p` design (no standardization is
/// applied here), `labels` are class columns in `0..k`, and `w` flattens
/// `k` rows of `p + 1` weights with the intercept first in each row.
/// Exposed so the analytic gradient used in training can be verified
/// numerically against finite differences of the objective.
pub fn logit_objective_grad(
    x: &[f64],
    labels: &[u32],
    p: usize,
    k: usize,
    w: &[f64],
    l2: f64,
) -> Result<(f64, Vec<f64>), ClassifierError> {
    if p == 0 {
        return Err(ClassifierError::EmptyFeatures);
    }
    let n = labels.len();
    if x.len() != n * p {
        return Err(ClassifierError::RaggedData { got: x.len(), features: p });
    }
    if w.len() != k * (p + 1) {
        return Err(ClassifierError::LengthMismatch {
            what: "weight vector",
            got: w.len(),
            expected: k * (p + 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&c| c as usize >= k) {
        return Err(ClassifierError::LengthMismatch {
            what: "label column",
            got: bad as usize,
            expected: k,
        });
    }
    let design = Design { x: x.to_vec(), labels: labels.to_vec(), n, p, k };
    Ok(objective_and_grad(&design, w, l2))
}

impl LogitModel {
    #[inline]
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    #[inline]
    pub fn selected_features(&self) -> &[String] {
        &self.selected_features
    }

    #[inline]
    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    #[inline]
    pub fn l2(&self) -> f64 {
        self.l2
    }

    #[inline]
    pub fn training_log(&self) -> &TrainingLog {
        &self.training_log
    }

    /// Squared L2 norm of the regularized (non-intercept) weights.
    pub fn penalty_norm(&self) -> f64 {
        self.weights.iter().flat_map(|row| &row[1..]).map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Softmax class probabilities for every row of `x`, columns in the
    /// model's class order. `x` may contain extra features in any order;
    /// the model's features are located by name.
    pub fn predict_probs(&self, x: &FeatureMatrix) -> Result<ProbMatrix, ClassifierError> {
        let cols: Vec<usize> = self
            .selected_features
            .iter()
            .map(|f| {
                x.feature_index(f).ok_or_else(|| ClassifierError::MissingFeature(f.clone()))
            })
            .collect::<Result<_, _>>()?;

        let k = self.classes.len();
        let mut data = Vec::with_capacity(x.n_rows() * k);
        let mut z = vec![0.0; k];
        for i in 0..x.n_rows() {
            let row = x.row(i);
            for (c, zc) in z.iter_mut().enumerate() {
                let wc = &self.weights[c];
                let mut acc = wc[0];
                for (idx, &j) in cols.iter().enumerate() {
                    acc += wc[idx + 1] * (row[j] - self.means[idx]) / self.sds[idx];
                }
                *zc = acc;
            }
            let zmax = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let total: f64 = z.iter().map(|&v| (v - zmax).exp()).sum();
            data.extend(z.iter().map(|&v| (v - zmax).exp() / total));
        }
        let probs = ProbMatrix::new(self.classes.clone(), data)?;
        match x.ids() {
            Some(ids) => Ok(probs.with_ids(ids.to_vec())?),
            None => Ok(probs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn matrix(names: &[&str], rows: &[&[f64]]) -> FeatureMatrix {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMatrix::new(names.iter().map(|s| s.to_string()).collect(), data).unwrap()
    }

    fn gaussian_rows(
        rng: &mut ChaCha8Rng,
        n: usize,
        p: usize,
        scale: impl Fn(usize) -> f64,
    ) -> Vec<f64> {
        (0..n * p)
            .map(|pos| {
                let v: f64 = rng.sample(StandardNormal);
                v * scale(pos % p)
            })
            .collect()
    }

    #[test]
    fn matrix_validates_shape_and_finiteness() {
        assert!(matches!(
            FeatureMatrix::new(vec![], vec![]),
            Err(ClassifierError::EmptyFeatures)
        ));
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(
            FeatureMatrix::new(names.clone(), vec![1.0, 2.0, 3.0]),
            Err(ClassifierError::RaggedData { got: 3, features: 2 })
        ));
        assert!(matches!(
            FeatureMatrix::new(names.clone(), vec![1.0, f64::NAN]),
            Err(ClassifierError::NonFiniteInput { row: 0, .. })
        ));
        assert!(matches!(
            FeatureMatrix::new(vec!["a".to_string(), "a".to_string()], vec![1.0, 2.0]),
            Err(ClassifierError::DuplicateFeature(_))
        ));
        let m = FeatureMatrix::new(names, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.n_rows(), 2);
        assert!(matches!(
            m.clone().with_ids(vec!["only".to_string()]),
            Err(ClassifierError::LengthMismatch { what: "row ids", .. })
        ));
    }

    #[test]
    fn top_variance_skips_constant_features() {
        let m = matrix(
            &["flat", "wide", "mid"],
            &[&[5.0, 0.0, 1.0], &[5.0, 10.0, 2.0], &[5.0, -10.0, 3.0]],
        );
        assert_eq!(select_top_variance(&m, 1).unwrap(), vec!["wide"]);
        assert_eq!(select_top_variance(&m, 2).unwrap(), vec!["wide", "mid"]);
        assert_eq!(select_top_variance(&m, 3).unwrap(), vec!["wide", "mid", "flat"]);
        assert!(matches!(
            select_top_variance(&m, 4),
            Err(ClassifierError::KTooLarge { k: 4, p: 3 })
        ));
        assert!(matches!(
            select_top_variance(&m, 0),
            Err(ClassifierError::KTooLarge { k: 0, p: 3 })
        ));
    }

    #[test]
    fn top_variance_breaks_ties_by_name() {
        let m = matrix(
            &["zeta", "alpha", "big"],
            &[&[1.0, 1.0, 0.0], &[2.0, 2.0, 50.0], &[3.0, 3.0, 100.0]],
        );
        // zeta and alpha tie exactly; alpha wins the remaining slot.
        assert_eq!(select_top_variance(&m, 2).unwrap(), vec!["big", "alpha"]);
    }

    #[test]
    fn top_variance_recovers_planted_signal_features() {
        let (n, p, planted) = (300, 200, 50);
        let mut total_recovered = 0usize;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Features 0..50 have sd 2, the rest sd 1.
            let data = gaussian_rows(&mut rng, n, p, |j| if j < planted { 2.0 } else { 1.0 });
            let names: Vec<String> = (0..p).map(|j| format!("f{j:03}")).collect();
            let m = FeatureMatrix::new(names, data).unwrap();
            let picked = select_top_variance(&m, planted).unwrap();
            total_recovered += picked
                .iter()
                .filter(|f| f[1..].parse::<usize>().unwrap() < planted)
                .count();
        }
        let mean = total_recovered as f64 / 20.0;
        assert!(mean >= 45.0, "recovered {mean} of {planted} planted features on average");
    }

    #[test]
    fn separable_two_class_data_reaches_full_accuracy() {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            rows.push(vec![-2.0 - 0.05 * i as f64, 1.0 + 0.01 * i as f64]);
            labels.push("neg");
            rows.push(vec![2.0 + 0.05 * i as f64, -1.0 - 0.01 * i as f64]);
            labels.push("pos");
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = matrix(&["x1", "x2"], &refs);
        let model = fit_logit(&m, &labels, 0.01, 500, 1e-7).unwrap();
        let probs = model.predict_probs(&m).unwrap();
        let mut correct = 0;
        for (i, want) in labels.iter().enumerate() {
            let got = &model.classes()[probs.point_prediction(i).unwrap() as usize];
            correct += (got == want) as usize;
        }
        assert_eq!(correct, labels.len());
    }

    #[test]
    fn uninformative_features_yield_class_frequencies() {
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = gaussian_rows(&mut rng, n, 4, |_| 1.0);
        let names: Vec<String> = (0..4).map(|j| format!("f{j}")).collect();
        let m = FeatureMatrix::new(names, data).unwrap();
        // 20% / 30% / 50% mix, independent of the features.
        let labels: Vec<&str> = (0..n)
            .map(|i| match i % 10 {
                0 | 1 => "a",
                2..=4 => "b",
                _ => "c",
            })
            .collect();
        let model = fit_logit(&m, &labels, 0.01, 300, 1e-6).unwrap();
        let probs = model.predict_probs(&m).unwrap();
        let mut mean = [0.0f64; 3];
        for i in 0..n {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += probs.row(i)[c] / n as f64;
            }
        }
        for (m, want) in mean.iter().zip([0.2, 0.3, 0.5]) {
            assert!((m - want).abs() < 0.03, "mean prob {m} vs frequency {want}");
        }
    }

    #[test]
    fn objective_trace_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 120;
        let data = gaussian_rows(&mut rng, n, 6, |_| 1.0);
        let names: Vec<String> = (0..6).map(|j| format!("f{j}")).collect();
        let m = FeatureMatrix::new(names, data).unwrap();
        let labels: Vec<String> =
            (0..n).map(|i| format!("c{}", [0, 1, 2, 1][i % 4])).collect();
        let model = fit_logit(&m, &labels, 0.05, 200, 1e-9).unwrap();
        let trace = &model.training_log().objective_trace;
        assert!(trace.len() >= 2);
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "objective rose: {pair:?}");
        }
        assert_eq!(*trace.last().unwrap(), model.training_log().final_objective);
    }

    /// Central finite differences on a small instance: every gradient
    /// coordinate must agree to relative 1e-4.
    #[test]
    fn gradient_matches_finite_differences() {
        let (n, p, k) = (25, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..n * p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k as u32)).collect();
        let w: Vec<f64> =
            (0..k * (p + 1)).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
        let l2 = 0.1;
        let (_, grad) = logit_objective_grad(&x, &labels, p, k, &w, l2).unwrap();
        let h = 1e-5;
        for idx in 0..w.len() {
            let mut wp = w.clone();
            wp[idx] += h;
            let (op, _) = logit_objective_grad(&x, &labels, p, k, &wp, l2).unwrap();
            let mut wm = w.clone();
            wm[idx] -= h;
            let (om, _) = logit_objective_grad(&x, &labels, p, k, &wm, l2).unwrap();
            let fd = (op - om) / (2.0 * h);
            let denom = grad[idx].abs().max(fd.abs()).max(1e-8);
            assert!(
                ((grad[idx] - fd) / denom).abs() < 1e-4,
                "coordinate {idx}: analytic {} vs numeric {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn zero_weight_model_predicts_uniform_rows() {
        let text = serde_json::json!({
            "weights": [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
            "selected_features": ["f0"],
            "classes": ["a", "b", "c"],
            "means": [0.0],
            "sds": [1.0],
            "l2": 0.0,
            "training_log": {
                "iterations": 0,
                "final_objective": 0.0,
                "converged": true,
                "objective_trace": []
            }
        });
        let model: LogitModel = serde_json::from_value(text).unwrap();
        let m = matrix(&["f0"], &[&[3.0], &[-1.0]]);
        let probs = model.predict_probs(&m).unwrap();
        for i in 0..2 {
            for v in probs.row(i) {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predictions_are_normalized_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200;
        let data = gaussian_rows(&mut rng, n, 8, |_| 1.5);
        let names: Vec<String> = (0..8).map(|j| format!("f{j}")).collect();
        let m = FeatureMatrix::new(names, data).unwrap();
        let labels: Vec<&str> = (0..n).map(|i| ["a", "b", "c", "d"][i % 4]).collect();
        let model = fit_logit(&m, &labels, 0.01, 150, 1e-6).unwrap();
        let probs = model.predict_probs(&m).unwrap();
        for i in 0..n {
            let total: f64 = probs.row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "row {i} sums to {total}");
        }
    }

    /// Permuting a fitted model's class rows permutes prediction columns
    /// and changes nothing else (up to summation-order rounding in the
    /// softmax normalizer).
    #[test]
    fn class_permutation_permutes_probability_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 90;
        let data = gaussian_rows(&mut rng, n, 5, |_| 1.0);
        let names: Vec<String> = (0..5).map(|j| format!("f{j}")).collect();
        let m = FeatureMatrix::new(names, data).unwrap();
        let labels: Vec<&str> = (0..n).map(|i| ["a", "b", "c"][i % 3]).collect();
        let model = fit_logit(&m, &labels, 0.05, 200, 1e-8).unwrap();

        let mut doc = serde_json::to_value(&model).unwrap();
        // Rotate classes and weight rows together: (a, b, c) -> (b, c, a).
        for key in ["classes", "weights"] {
            let arr = doc[key].as_array_mut().unwrap();
            arr.rotate_left(1);
        }
        let rotated: LogitModel = serde_json::from_value(doc).unwrap();

        let p1 = model.predict_probs(&m).unwrap();
        let p2 = rotated.predict_probs(&m).unwrap();
        for class in ["a", "b", "c"] {
            let c1 = p1.class_index(class).unwrap() as usize;
            let c2 = p2.class_index(class).unwrap() as usize;
            for i in 0..n {
                assert!(
                    (p1.row(i)[c1] - p2.row(i)[c2]).abs() < 1e-12,
                    "row {i}, class {class}"
                );
            }
        }
    }

    /// Refitting under relabeled classes lands on the permuted optimum to
    /// optimization accuracy.
    #[test]
    fn relabeled_refit_matches_to_optimizer_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 90;
        let data = gaussian_rows(&mut rng, n, 5, |_| 1.0);
        let names: Vec<String> = (0..5).map(|j| format!("f{j}")).collect();
        let m = FeatureMatrix::new(names, data).unwrap();
        let base: Vec<&str> = (0..n).map(|i| ["a", "b", "c"][i % 3]).collect();
        // Swap names so sorted class order changes: a->z, b->a, c->m.
        let renamed: Vec<&str> = base
            .iter()
            .map(|l| match *l {
                "a" => "z",
                "b" => "a",
                _ => "m",
            })
            .collect();
        let m1 = fit_logit(&m, &base, 0.05, 400, 1e-9).unwrap();
        let m2 = fit_logit(&m, &renamed, 0.05, 400, 1e-9).unwrap();
        let p1 = m1.predict_probs(&m).unwrap();
        let p2 = m2.predict_probs(&m).unwrap();
        for (old, new) in [("a", "z"), ("b", "a"), ("c", "m")] {
            let c1 = p1.class_index(old).unwrap() as usize;
            let c2 = p2.class_index(new).unwrap() as usize;
            for i in 0..n {
                assert!(
                    (p1.row(i)[c1] - p2.row(i)[c2]).abs() < 1e-5,
                    "row {i}, class {old}->{new}"
                );
            }
        }
    }

    #[test]
    fn stronger_regularization_never_grows_the_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 150;
        let data = gaussian_rows(&mut rng, n, 6, |_| 1.0);
        let names: Vec<String> = (0..6).map(|j| format!("f{j}")).collect();
        let m = FeatureMatrix::new(names, data).unwrap();
        // Labels depend on the first feature so weights are nonzero.
        let labels: Vec<&str> = (0..n)
            .map(|i| if m.row(i)[0] > 0.3 { "hi" } else if m.row(i)[0] < -0.3 { "lo" } else { "mid" })
            .collect();
        let norms: Vec<f64> = [0.01, 0.1, 1.0]
            .iter()
            .map(|&l2| fit_logit(&m, &labels, l2, 400, 1e-8).unwrap().penalty_norm())
            .collect();
        assert!(norms[0] >= norms[1] && norms[1] >= norms[2], "norms {norms:?}");
    }

    #[test]
    fn constant_features_are_dropped_from_the_model() {
        let m = matrix(
            &["live", "stuck"],
            &[&[0.0, 7.0], &[1.0, 7.0], &[2.0, 7.0], &[3.0, 7.0]],
        );
        let labels = ["a", "a", "b", "b"];
        let model = fit_logit(&m, &labels, 0.01, 200, 1e-7).unwrap();
        assert_eq!(model.selected_features(), ["live".to_string()]);
        // Prediction does not require the dropped feature at all.
        let only_live = matrix(&["live"], &[&[0.5], &[2.5]]);
        let probs = model.predict_probs(&only_live).unwrap();
        assert_eq!(probs.n_rows(), 2);
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        let m = matrix(&["f"], &[&[1.0], &[2.0], &[3.0]]);
        assert_eq!(
            fit_logit(&m, &["a", "a", "a"], 0.1, 10, 1e-4).unwrap_err(),
            ClassifierError::SingleClass
        );
        assert!(matches!(
            fit_logit(&m, &["a", "b"], 0.1, 10, 1e-4).unwrap_err(),
            ClassifierError::LengthMismatch { what: "labels", .. }
        ));
        assert!(matches!(
            fit_logit(&m, &["a", "b", "c"], -0.5, 10, 1e-4).unwrap_err(),
            ClassifierError::InvalidHyper(_)
        ));
        assert!(matches!(
            fit_logit(&m, &["a", "b", "c"], 0.1, 0, 1e-4).unwrap_err(),
            ClassifierError::InvalidHyper(_)
        ));
        assert!(matches!(
            fit_logit(&m, &["a", "b", "c"], 0.1, 10, 0.0).unwrap_err(),
            ClassifierError::InvalidHyper(_)
        ));
        // Two rows with two classes is the smallest legal problem.
        let two = matrix(&["f"], &[&[1.0], &[2.0]]);
        assert!(fit_logit(&two, &["a", "b"], 0.1, 10, 1e-4).is_ok());
    }

    #[test]
    fn predict_requires_all_model_features() {
        let m = matrix(&["f0", "f1"], &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]]);
        let model = fit_logit(&m, &["a", "b", "a", "b"], 0.1, 50, 1e-5).unwrap();
        let missing = matrix(&["f0"], &[&[1.0]]);
        assert_eq!(
            model.predict_probs(&missing).unwrap_err(),
            ClassifierError::MissingFeature("f1".into())
        );
        // Extra columns and a different order are fine.
        let reordered = matrix(&["extra", "f1", "f0"], &[&[9.0, 0.0, 1.0]]);
        assert!(model.predict_probs(&reordered).is_ok());
    }

    #[test]
    fn model_round_trips_through_json_with_identical_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 60;
        let data = gaussian_rows(&mut rng, n, 4, |_| 1.0);
        let names: Vec<String> = (0..4).map(|j| format!("f{j}")).collect();
        let m = FeatureMatrix::new(names, data).unwrap();
        let labels: Vec<&str> = (0..n).map(|i| ["a", "b"][i % 2]).collect();
        let model = fit_logit(&m, &labels, 0.05, 100, 1e-6).unwrap();
        let text = serde_json::to_string(&model).unwrap();
        let back: LogitModel = serde_json::from_str(&text).unwrap();
        let p1 = model.predict_probs(&m).unwrap();
        let p2 = back.predict_probs(&m).unwrap();
        for i in 0..n {
            assert_eq!(p1.row(i), p2.row(i), "row {i} differs after round trip");
        }
    }

    #[test]
    fn fit_is_bit_stable_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 600;
        let data = gaussian_rows(&mut rng, n, 7, |_| 1.0);
        let names: Vec<String> = (0..7).map(|j| format!("f{j}")).collect();
        let m = FeatureMatrix::new(names, data).unwrap();
        let labels: Vec<&str> = (0..n).map(|i| ["a", "b", "c"][i % 3]).collect();
        let fit_in = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| fit_logit(&m, &labels, 0.05, 60, 1e-8).unwrap())
        };
        let w1 = fit_in(1);
        let w4 = fit_in(4);
        assert_eq!(w1.weights(), w4.weights());
        assert_eq!(
            w1.training_log().final_objective.to_bits(),
            w4.training_log().final_objective.to_bits()
        );
    }
}
