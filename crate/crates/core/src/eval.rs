//! Prediction-set quality metrics and repeated-trial coverage studies.
//!
//! [`evaluate`] reduces one batch of prediction sets against known labels to
//! summary metrics: empirical coverage, mean set size, mean homogeneity (the
//! average pairwise graph distance between the leaves inside a set), a size
//! histogram, and per-class coverage.
//!
//! [`run_study`] repeats an entire pipeline — draw fresh data, fit or reuse a
//! model, calibrate, predict, score — over many independent trials. For split
//! conformal with exchangeable data, the per-trial coverage of a calibration
//! set of size `n` at miscoverage level `alpha` follows a known finite-sample
//! law, `Beta(n + 1 - l, l)` with `l = floor((n + 1) * alpha)`, which
//! [`beta_reference`] provides; the study reports a Kolmogorov–Smirnov
//! statistic of the observed per-trial coverages against that law. Graph
//! calibration has no closed-form finite-sample coverage law, so its studies
//! report coverage without a reference.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{self, ClassifierError, FeatureMatrix, LogitModel};
use crate::crc::{self, CrcError};
use crate::graph::GraphError;
use crate::scores::{ClassMap, LabeledBatch, ProbMatrix, ScoreError};
use crate::sets::PredictionSet;
use crate::shift::{self, ConformalMethod, PropEstimator, ShiftError};
use crate::split::{self, SplitError};
use crate::stats;
use crate::synth::{self, Generator, SynthConfig, SynthError};

/// Errors from evaluation and study runs.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: got {got}, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("cannot evaluate an empty batch of prediction sets")]
    EmptyBatch,
    #[error("true label {0:?} is not one of the class columns")]
    UnknownLabel(String),
    #[error("prediction set references class column {col} but only {k} classes exist")]
    ClassOutOfRange { col: u32, k: usize },
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),
    #[error(
        "coverage reference law is degenerate: floor((n + 1) * alpha) = 0 \
         for n = {n}, alpha = {alpha}; more calibration rows are needed"
    )]
    DegenerateL { n: usize, alpha: f64 },
    #[error("a study needs at least one trial")]
    NoTrials,
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Crc(#[from] CrcError),
    #[error(transparent)]
    Shift(#[from] ShiftError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Summary metrics for one batch of prediction sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Number of evaluated rows.
    pub n: usize,
    /// Fraction of rows whose true class is inside the set.
    pub coverage: f64,
    /// Mean number of leaf classes per set.
    pub mean_size: f64,
    /// Mean over sets of the average pairwise undirected graph distance
    /// between member leaves; singletons and empty sets contribute 0.
    pub mean_homogeneity: f64,
    /// Set size -> number of rows with that size. Counts sum to `n`.
    pub size_histogram: BTreeMap<usize, usize>,
    /// True class -> fraction of its rows covered. Only classes that occur
    /// in the truth labels appear.
    pub per_class_coverage: BTreeMap<String, f64>,
}

/// Scores a batch of prediction sets against known labels.
///
/// `map` provides the class-column order (which must be the one the sets were
/// built against) and the graph distances behind the homogeneity metric.
pub fn evaluate<S: AsRef<str>>(
    map: &ClassMap,
    sets: &[PredictionSet],
    truth: &[S],
) -> Result<EvalReport, EvalError> {
    if truth.len() != sets.len() {
        return Err(EvalError::LengthMismatch {
            what: "truth labels",
            got: truth.len(),
            expected: sets.len(),
        });
    }
    if sets.is_empty() {
        return Err(EvalError::EmptyBatch);
    }
    let names = map.class_names();
    let mut col_of = HashMap::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        col_of.insert(name.as_str(), j as u32);
    }
    let mut covered = 0usize;
    let mut size_sum = 0usize;
    let mut hom_sum = 0.0f64;
    let mut size_histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let mut per_class: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (set, label) in sets.iter().zip(truth) {
        // Classes are stored sorted, so the last one is the largest column.
        if let Some(&col) = set.classes().last() {
            if col as usize >= names.len() {
                return Err(EvalError::ClassOutOfRange { col, k: names.len() });
            }
        }
        let label = label.as_ref();
        let &col = col_of
            .get(label)
            .ok_or_else(|| EvalError::UnknownLabel(label.to_string()))?;
        let hit = set.contains(col);
        covered += hit as usize;
        size_sum += set.size();
        *size_histogram.entry(set.size()).or_insert(0) += 1;
        hom_sum += map.homogeneity(set.classes());
        let entry = per_class.entry(label).or_insert((0, 0));
        entry.0 += hit as usize;
        entry.1 += 1;
    }
    let n = sets.len();
    let per_class_coverage = per_class
        .into_iter()
        .map(|(class, (hits, total))| (class.to_string(), hits as f64 / total as f64))
        .collect();
    Ok(EvalReport {
        n,
        coverage: covered as f64 / n as f64,
        mean_size: size_sum as f64 / n as f64,
        mean_homogeneity: hom_sum / n as f64,
        size_histogram,
        per_class_coverage,
    })
}

/// Parameters `(a, b)` of the Beta law followed by split-conformal coverage.
///
/// With a calibration set of size `n` and level `alpha`, per-trial coverage
/// is distributed as `Beta(n + 1 - l, l)` where `l = floor((n + 1) * alpha)`.
/// The arithmetic shares the quantile-index computation with calibration so
/// the two can never disagree at floating-point boundary cases; `l = 0`
/// (alpha too small for `n`) is exactly the regime where calibration itself
/// is infeasible and yields [`EvalError::DegenerateL`].
pub fn beta_reference(n: usize, alpha: f64) -> Result<(f64, f64), EvalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EvalError::InvalidAlpha(alpha));
    }
    let k = split::quantile_index(alpha, n);
    if k > n {
        return Err(EvalError::DegenerateL { n, alpha });
    }
    Ok((k as f64, (n + 1 - k) as f64))
}

/// Which probability model a study trial uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Exact class posteriors of the source generator (no estimation error).
    Bayes,
    /// A multinomial-logit classifier fit on a fresh training sample each
    /// trial.
    Logit(LogitParams),
}

/// Hyperparameters for the per-trial logit fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogitParams {
    /// Training rows drawn per trial.
    pub n_train: usize,
    /// Number of top-variance features kept.
    pub top_k: usize,
    /// Ridge strength.
    pub l2: f64,
    /// Gradient-descent iteration cap.
    pub max_iter: usize,
    /// Gradient max-norm stopping tolerance.
    pub tol: f64,
}

impl Default for LogitParams {
    fn default() -> Self {
        LogitParams { n_train: 500, top_k: 16, l2: 0.01, max_iter: 500, tol: 1e-6 }
    }
}

/// Label-shift handling applied in each trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    /// Calibrate once on the raw calibration set.
    None,
    /// Two-fold resampling correction with estimated test proportions.
    TwoFold,
    /// Two-fold correction fed the true test label frequencies.
    Oracle,
}

/// Full description of one simulation setting.
///
/// Two scenarios that differ only in `method` or `correction` draw identical
/// data under the same study seed, so their per-trial metrics can be compared
/// pairwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyScenario {
    /// Generator for training and calibration data.
    pub generator: SynthConfig,
    /// Test-time class proportions; `None` keeps the generator's own
    /// (exchangeable data, no label shift).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_props: Option<Vec<f64>>,
    pub model: ModelKind,
    pub method: ConformalMethod,
    pub correction: Correction,
    /// Proportion estimator used by the `two_fold` correction.
    #[serde(default)]
    pub estimator: PropEstimator,
    pub alpha: f64,
    pub n_calib: usize,
    pub n_test: usize,
}

/// Results of a repeated-trial coverage study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStudy {
    pub scenario: StudyScenario,
    pub trials: usize,
    pub seed: u64,
    /// Calibration size (the `n` of the Beta reference law).
    pub n: usize,
    pub alpha: f64,
    pub mean_coverage: f64,
    pub mean_size: f64,
    pub mean_homogeneity: f64,
    pub per_trial_coverage: Vec<f64>,
    pub per_trial_mean_size: Vec<f64>,
    pub per_trial_mean_homogeneity: Vec<f64>,
    /// `(n + 1 - l, l)` for the split method; graph calibration has no
    /// closed-form finite-sample coverage law, so `None` there.
    pub beta_params: Option<(f64, f64)>,
    /// Kolmogorov–Smirnov distance between the per-trial coverages and the
    /// Beta reference (split method only).
    pub ks_statistic_vs_beta: Option<f64>,
}

/// SplitMix64 finalizer. Correction seeds must stay uncorrelated with the
/// per-trial ChaCha sampling streams, which share the master seed; running
/// (master, trial) through an unrelated mixer guarantees that.
fn derive_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn model_probs(
    source: &Generator,
    model: Option<&LogitModel>,
    x: &FeatureMatrix,
) -> Result<ProbMatrix, EvalError> {
    match model {
        Some(m) => Ok(m.predict_probs(x)?),
        None => Ok(source.posterior_probs(x)?),
    }
}

struct TrialOutcome {
    coverage: f64,
    mean_size: f64,
    mean_homogeneity: f64,
}

fn run_trial(
    scenario: &StudyScenario,
    source: &Generator,
    target: &Generator,
    seed: u64,
    trial: u64,
) -> Result<TrialOutcome, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    let model = match &scenario.model {
        ModelKind::Bayes => None,
        ModelKind::Logit(params) => {
            let (x, y) = source.sample(params.n_train, &mut rng)?;
            let keep = classifier::select_top_variance(&x, params.top_k)?;
            let xk = x.select_features(&keep)?;
            Some(classifier::fit_logit(&xk, &y, params.l2, params.max_iter, params.tol)?)
        }
    };
    let (cx, cy) = source.sample(scenario.n_calib, &mut rng)?;
    let (tx, ty) = target.sample(scenario.n_test, &mut rng)?;
    let calib_probs = model_probs(source, model.as_ref(), &cx)?;
    let test_probs = model_probs(source, model.as_ref(), &tx)?;
    let calib = LabeledBatch::new(calib_probs, &cy)?;
    let graph = source.graph();
    let map = ClassMap::new(graph, calib.probs().class_names())?;
    let sets = match scenario.correction {
        Correction::None => match scenario.method {
            ConformalMethod::Split => {
                split::calibrate(&calib, scenario.alpha)?.predict_all(&test_probs)?
            }
            ConformalMethod::Graph => crc::calibrate(&map, &calib, scenario.alpha, 1.0)?
                .predict_all(&map, &test_probs)?,
        },
        Correction::TwoFold => {
            shift::two_fold_correct_with(
                graph,
                &calib,
                &test_probs,
                scenario.alpha,
                scenario.method,
                scenario.estimator,
                derive_seed(seed, trial),
            )?
            .0
        }
        Correction::Oracle => {
            let test = LabeledBatch::new(test_probs.clone(), &ty)?;
            shift::oracle_correct(
                graph,
                &calib,
                &test,
                scenario.alpha,
                scenario.method,
                derive_seed(seed, trial),
            )?
        }
    };
    let report = evaluate(&map, &sets, &ty)?;
    Ok(TrialOutcome {
        coverage: report.coverage,
        mean_size: report.mean_size,
        mean_homogeneity: report.mean_homogeneity,
    })
}

/// Runs `trials` independent end-to-end trials of `scenario`.
///
/// Each trial draws fresh training (logit model only), calibration, and test
/// data on its own RNG stream derived from `seed`, so results are
/// reproducible and independent of how trials are scheduled across threads.
pub fn run_study(
    scenario: &StudyScenario,
    trials: usize,
    seed: u64,
) -> Result<CoverageStudy, EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    if !(scenario.alpha > 0.0 && scenario.alpha < 1.0) {
        return Err(EvalError::InvalidAlpha(scenario.alpha));
    }
    let source = Generator::new(&scenario.generator)?;
    let test_cfg = match &scenario.test_props {
        Some(props) => synth::shift_props(&scenario.generator, props)?,
        None => scenario.generator.clone(),
    };
    let target = Generator::new(&test_cfg)?;
    let outcomes = (0..trials)
        .into_par_iter()
        .map(|t| run_trial(scenario, &source, &target, seed, t as u64))
        .collect::<Result<Vec<TrialOutcome>, EvalError>>()?;
    let per_trial_coverage: Vec<f64> = outcomes.iter().map(|o| o.coverage).collect();
    let per_trial_mean_size: Vec<f64> = outcomes.iter().map(|o| o.mean_size).collect();
    let per_trial_mean_homogeneity: Vec<f64> =
        outcomes.iter().map(|o| o.mean_homogeneity).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (beta_params, ks_statistic_vs_beta) = match scenario.method {
        ConformalMethod::Split => {
            let (a, b) = beta_reference(scenario.n_calib, scenario.alpha)?;
            let ks = stats::ks_statistic(&per_trial_coverage, |x| stats::inc_beta(a, b, x));
            (Some((a, b)), Some(ks))
        }
        ConformalMethod::Graph => (None, None),
    };
    Ok(CoverageStudy {
        scenario: scenario.clone(),
        trials,
        seed,
        n: scenario.n_calib,
        alpha: scenario.alpha,
        mean_coverage: mean(&per_trial_coverage),
        mean_size: mean(&per_trial_mean_size),
        mean_homogeneity: mean(&per_trial_mean_homogeneity),
        per_trial_coverage,
        per_trial_mean_size,
        per_trial_mean_homogeneity,
        beta_params,
        ks_statistic_vs_beta,
    })
}
