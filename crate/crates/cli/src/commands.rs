//! Implementations of the ten subcommands.
//!
//! Each command reads its inputs, calls into the library, writes artifacts,
//! and prints exactly one line of JSON to stdout summarizing what happened.
//! Artifact files carry the tool version and a SHA-256 hash of the fully
//! resolved configuration, so any output can be traced back to the exact
//! settings that produced it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use hiconform_core::classifier::{fit_logit, select_top_variance, FeatureMatrix, LogitModel};
use hiconform_core::eval::{self, Correction, StudyScenario};
use hiconform_core::graph::LabelGraph;
use hiconform_core::io::{self, IoError, SetRecord};
use hiconform_core::scores::{ClassMap, LabeledBatch, ProbMatrix};
use hiconform_core::sets::PredictionSet;
use hiconform_core::shift::{self, ConformalMethod, PropEstimator};
use hiconform_core::synth::{self, SynthConfig};
use hiconform_core::{crc, split};

use crate::artifact::{self, CliError};

/// Seed salts keeping the pipeline's row shuffle and its correction
/// resampling on unrelated random streams derived from one master seed.
const SHUFFLE_SALT: u64 = 1;
const CORRECTION_SALT: u64 = 2;

// ---------------------------------------------------------------------------
// argument structs
// ---------------------------------------------------------------------------

/// Class scores come either from a probability CSV or from scoring a
/// feature CSV with a trained model; the two forms are mutually exclusive.
#[derive(Debug, Args)]
pub struct ScoredInput {
    /// Class-probability CSV (bypasses the built-in classifier).
    #[arg(long, conflicts_with_all = ["features", "model"])]
    pub probs: Option<PathBuf>,
    /// Feature CSV to score with --model.
    #[arg(long, requires = "model")]
    pub features: Option<PathBuf>,
    /// Trained model artifact from `train`.
    #[arg(long, requires = "features")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Number of rows to sample.
    #[arg(long, default_value_t = 5136)]
    pub n: usize,
    /// Output feature CSV with a trailing label column.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured seed (HICONFORM_SEED trumps this flag).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the label graph as a parent<TAB>child edge list.
    #[arg(long)]
    pub graph_out: Option<PathBuf>,
    /// Also write the exact population posterior for each sampled row.
    #[arg(long)]
    pub probs_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Feature CSV (optional leading `id` column, optional `label` column).
    #[arg(long)]
    pub features: PathBuf,
    /// Label file, one per row; defaults to the CSV's label column.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// How many top-variance features to keep.
    #[arg(long, default_value_t = 50)]
    pub k_features: usize,
    /// Ridge penalty strength.
    #[arg(long, default_value_t = 0.01)]
    pub l2: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Output model artifact.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitCalibrateArgs {
    #[command(flatten)]
    pub input: ScoredInput,
    /// Label file, one per row; defaults to the CSV's label column.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Target miscoverage level.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Output calibration artifact.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrcCalibrateArgs {
    #[command(flatten)]
    pub input: ScoredInput,
    /// Label graph edge list (parent<TAB>child); leaves must match the
    /// class columns.
    #[arg(long)]
    pub graph: PathBuf,
    /// Label file, one per row; defaults to the CSV's label column.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Target risk level.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Worst-case value of the miscoverage loss.
    #[arg(long, default_value_t = 1.0)]
    pub loss_bound: f64,
    /// Output calibration artifact.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Calibration artifact from the matching calibrate subcommand.
    #[arg(long)]
    pub calibration: PathBuf,
    #[command(flatten)]
    pub input: ScoredInput,
    /// Label graph edge list, used to report anchors and homogeneity.
    #[arg(long)]
    pub graph: PathBuf,
    /// Output JSONL, one prediction-set record per row.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    /// Label graph edge list (parent<TAB>child).
    #[arg(long)]
    pub graph: PathBuf,
    /// Calibration-set probability CSV.
    #[arg(long)]
    pub calib_probs: PathBuf,
    /// Calibration labels; defaults to the CSV's label column.
    #[arg(long)]
    pub calib_labels: Option<PathBuf>,
    /// Probability CSV of the rows to correct for and predict on.
    #[arg(long)]
    pub test_probs: PathBuf,
    /// True test labels; required by --correction oracle.
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// Target miscoverage level.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Calibrator wrapped by the correction: "split" or "graph".
    #[arg(long, default_value = "split")]
    pub method: String,
    /// "two_fold" (estimated proportions) or "oracle" (true labels).
    #[arg(long, default_value = "two_fold")]
    pub correction: String,
    /// Proportion estimator for two_fold: "soft" or "hard".
    #[arg(long, default_value = "soft")]
    pub estimator: String,
    /// Resampling seed (HICONFORM_SEED trumps this flag).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSONL of corrected prediction sets.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional full audit artifact (fold assignment included).
    #[arg(long)]
    pub audit_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction-set JSONL from a predict or correct run.
    #[arg(long)]
    pub sets: PathBuf,
    /// True labels, one per record.
    #[arg(long)]
    pub labels: PathBuf,
    /// Label graph edge list (parent<TAB>child).
    #[arg(long)]
    pub graph: PathBuf,
    /// Output report artifact.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Scenario JSON: generator, model, method, correction, sizes.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Number of independent trials.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Master seed; per-trial streams derive from it (HICONFORM_SEED
    /// trumps this flag).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output study artifact.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional gnuplot-compatible histogram of per-trial coverage.
    #[arg(long)]
    pub emit_hist: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Run configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the configured seed (HICONFORM_SEED trumps this flag).
    #[arg(long)]
    pub seed: Option<u64>,
}

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

fn default_alpha() -> f64 {
    0.1
}
fn default_method() -> ConformalMethod {
    ConformalMethod::Split
}
fn default_correction() -> Correction {
    Correction::None
}
fn default_k_features() -> usize {
    50
}
fn default_l2() -> f64 {
    0.01
}
fn default_max_iter() -> usize {
    500
}
fn default_tol() -> f64 {
    1e-6
}
fn default_n_train() -> usize {
    500
}
fn default_n_calib() -> usize {
    1000
}

/// Everything one end-to-end run needs. Artifact hashes derive from this
/// struct after defaults are filled and the seed override is applied, so a
/// hash pins the run completely.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Label graph edge list (parent<TAB>child).
    pub graph: PathBuf,
    /// Feature CSV scored by the built-in classifier…
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    /// …or a class-probability CSV that bypasses it (exactly one of the
    /// two must be set).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<PathBuf>,
    /// Label file; optional when the input CSV embeds a label column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_method")]
    pub method: ConformalMethod,
    #[serde(default = "default_correction")]
    pub correction: Correction,
    #[serde(default)]
    pub estimator: PropEstimator,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_k_features")]
    pub k_features: usize,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Rows used to fit the classifier; ignored for probability input.
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_calib")]
    pub n_calib: usize,
    pub out_dir: PathBuf,
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn parse_method(raw: &str) -> Result<ConformalMethod, CliError> {
    match raw {
        "split" => Ok(ConformalMethod::Split),
        "graph" => Ok(ConformalMethod::Graph),
        other => {
            Err(CliError::Config(format!("--method must be \"split\" or \"graph\", got {other:?}")))
        }
    }
}

fn parse_estimator(raw: &str) -> Result<PropEstimator, CliError> {
    match raw {
        "soft" => Ok(PropEstimator::Soft),
        "hard" => Ok(PropEstimator::Hard),
        other => Err(CliError::Config(format!(
            "--estimator must be \"soft\" or \"hard\", got {other:?}"
        ))),
    }
}

/// OS-level file errors carry no file name of their own; stamp it on so
/// "no such file" always says which file.
fn at_path<T>(result: Result<T, IoError>, path: &Path) -> Result<T, CliError> {
    result.map_err(|e| match e {
        IoError::Io(inner) => CliError::Data(format!("{}: {inner}", path.display())),
        other => CliError::from(other),
    })
}

/// SplitMix64 finalizer, used to derive unrelated seeds from one master.
fn derive_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loads class scores from whichever input form was given, along with any
/// labels embedded in the CSV.
fn load_scores(input: &ScoredInput) -> Result<(ProbMatrix, Option<Vec<String>>), CliError> {
    match (&input.probs, &input.features, &input.model) {
        (Some(path), None, None) => {
            let file = at_path(io::read_probs_csv(path), path)?;
            Ok((file.probs, file.labels))
        }
        (None, Some(path), Some(model_path)) => {
            let file = at_path(io::read_features_csv(path), path)?;
            let model: artifact::Artifact<LogitModel> = artifact::load_artifact(model_path)?;
            let probs = model.payload.predict_probs(&file.features)?;
            let probs = match file.features.ids() {
                Some(ids) => probs.with_ids(ids.to_vec())?,
                None => probs,
            };
            Ok((probs, file.labels))
        }
        _ => Err(CliError::Config(
            "provide class scores as either --probs, or --features together with --model".into(),
        )),
    }
}

/// Labels come from an explicit file when given, else from the label
/// column of the input CSV.
fn resolve_labels(
    flag: &Option<PathBuf>,
    embedded: Option<Vec<String>>,
    what: &str,
) -> Result<Vec<String>, CliError> {
    match flag {
        Some(path) => at_path(io::read_labels(path), path),
        None => embedded.ok_or_else(|| {
            CliError::Config(format!(
                "{what}: provide a label file or include a label column in the CSV"
            ))
        }),
    }
}

/// Leaf names of the graph in sorted order — the class-column convention
/// every matrix in this tool uses.
fn leaf_class_names(graph: &LabelGraph) -> Vec<String> {
    let mut names: Vec<String> =
        graph.leaves().iter().map(|&v| graph.name(v).to_string()).collect();
    names.sort();
    names
}

/// One JSONL record per set, ids taken from the probability rows when
/// present and synthesized as `r<index>` otherwise.
fn set_records(map: &ClassMap, probs: &ProbMatrix, sets: &[PredictionSet]) -> Vec<SetRecord> {
    sets.iter()
        .enumerate()
        .map(|(i, set)| {
            let id = match probs.ids() {
                Some(ids) => ids[i].clone(),
                None => format!("r{i}"),
            };
            SetRecord::new(map, set, id)
        })
        .collect()
}

/// Companion metadata written next to every prediction-set JSONL, so the
/// streamable format still has a provenance-stamped envelope.
#[derive(Debug, Serialize, Deserialize)]
struct SetsMeta {
    records: usize,
    mean_size: f64,
    mean_homogeneity: f64,
}

/// Writes the JSONL plus its `.meta.json` sidecar; returns the summary
/// numbers for the stdout line.
fn write_sets(path: &Path, records: &[SetRecord], hash: &str) -> Result<SetsMeta, CliError> {
    at_path(io::write_sets_jsonl(path, records), path)?;
    let n = records.len().max(1) as f64;
    let meta = SetsMeta {
        records: records.len(),
        mean_size: records.iter().map(|r| r.size as f64).sum::<f64>() / n,
        mean_homogeneity: records.iter().map(|r| r.homogeneity).sum::<f64>() / n,
    };
    let meta_path = sets_meta_path(path);
    artifact::save_artifact(&meta_path, hash, &meta)?;
    Ok(meta)
}

fn sets_meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn gather(labels: &[String], rows: &[usize]) -> Vec<String> {
    rows.iter().map(|&r| labels[r].clone()).collect()
}

fn subset_ids(ids: Option<&[String]>, rows: &[usize]) -> Vec<String> {
    rows.iter()
        .map(|&r| match ids {
            Some(v) => v[r].clone(),
            None => format!("r{r}"),
        })
        .collect()
}

fn subset_features(x: &FeatureMatrix, rows: &[usize]) -> Result<FeatureMatrix, CliError> {
    let mut data = Vec::with_capacity(rows.len() * x.n_features());
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Ok(FeatureMatrix::new(x.feature_names().to_vec(), data)?)
}

fn subset_probs(p: &ProbMatrix, rows: &[usize]) -> Result<ProbMatrix, CliError> {
    let mut data = Vec::with_capacity(rows.len() * p.n_classes());
    for &r in rows {
        data.extend_from_slice(p.row(r));
    }
    Ok(ProbMatrix::new(p.class_names().to_vec(), data)?)
}

fn emit(summary: serde_json::Value) {
    println!("{summary}");
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let mut cfg: SynthConfig = artifact::load_config(&args.config)?;
    cfg.seed = artifact::resolve_seed(args.seed, cfg.seed)?;
    let hash = artifact::config_hash(&cfg);

    let (features, labels) = synth::generate(&cfg, args.n)?;
    at_path(io::write_features_csv(&args.out, &features, Some(&labels)), &args.out)?;

    if args.graph_out.is_some() || args.probs_out.is_some() {
        let generator = synth::Generator::new(&cfg)?;
        if let Some(path) = &args.graph_out {
            at_path(io::write_edges(path, generator.graph()), path)?;
        }
        if let Some(path) = &args.probs_out {
            let probs = generator.posterior_probs(&features)?;
            at_path(io::write_probs_csv(path, &probs, Some(&labels)), path)?;
        }
    }

    emit(json!({
        "command": "synth",
        "version": artifact::VERSION,
        "config_sha256": hash,
        "seed": cfg.seed,
        "n": args.n,
        "classes": cfg.class_props.len(),
        "features": cfg.n_features,
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let file = at_path(io::read_features_csv(&args.features), &args.features)?;
    let labels = resolve_labels(&args.labels, file.labels, "train")?;

    let selected = select_top_variance(&file.features, args.k_features)?;
    let x = file.features.select_features(&selected)?;
    let model = fit_logit(&x, &labels, args.l2, args.max_iter, args.tol)?;

    let effective = json!({
        "command": "train",
        "features": args.features.display().to_string(),
        "labels": args.labels.as_ref().map(|p| p.display().to_string()),
        "k_features": args.k_features,
        "l2": args.l2,
        "max_iter": args.max_iter,
        "tol": args.tol,
    });
    let hash = artifact::config_hash(&effective);
    artifact::save_artifact(&args.out, &hash, &model)?;

    emit(json!({
        "command": "train",
        "version": artifact::VERSION,
        "config_sha256": hash,
        "rows": labels.len(),
        "classes": model.classes().len(),
        "selected_features": selected.len(),
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

pub fn split_calibrate(args: SplitCalibrateArgs) -> Result<(), CliError> {
    let (probs, embedded) = load_scores(&args.input)?;
    let labels = resolve_labels(&args.labels, embedded, "split-calibrate")?;
    let n = labels.len();
    let batch = LabeledBatch::new(probs, &labels)?;
    let calibration = split::calibrate(&batch, args.alpha)?;

    let effective = json!({
        "command": "split-calibrate",
        "probs": args.input.probs.as_ref().map(|p| p.display().to_string()),
        "features": args.input.features.as_ref().map(|p| p.display().to_string()),
        "model": args.input.model.as_ref().map(|p| p.display().to_string()),
        "labels": args.labels.as_ref().map(|p| p.display().to_string()),
        "alpha": args.alpha,
    });
    let hash = artifact::config_hash(&effective);
    artifact::save_artifact(&args.out, &hash, &calibration)?;

    emit(json!({
        "command": "split-calibrate",
        "version": artifact::VERSION,
        "config_sha256": hash,
        "n": n,
        "alpha": args.alpha,
        "q_hat": calibration.q_hat(),
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

pub fn crc_calibrate(args: CrcCalibrateArgs) -> Result<(), CliError> {
    let graph = at_path(io::load_graph(&args.graph), &args.graph)?;
    let (probs, embedded) = load_scores(&args.input)?;
    let labels = resolve_labels(&args.labels, embedded, "crc-calibrate")?;
    let n = labels.len();
    let class_names = probs.class_names().to_vec();
    let map = ClassMap::new(&graph, &class_names)?;
    let batch = LabeledBatch::new(probs, &labels)?;
    let calibration = crc::calibrate(&map, &batch, args.alpha, args.loss_bound)?;

    let effective = json!({
        "command": "crc-calibrate",
        "graph": args.graph.display().to_string(),
        "probs": args.input.probs.as_ref().map(|p| p.display().to_string()),
        "features": args.input.features.as_ref().map(|p| p.display().to_string()),
        "model": args.input.model.as_ref().map(|p| p.display().to_string()),
        "labels": args.labels.as_ref().map(|p| p.display().to_string()),
        "alpha": args.alpha,
        "loss_bound": args.loss_bound,
    });
    let hash = artifact::config_hash(&effective);
    artifact::save_artifact(&args.out, &hash, &calibration)?;

    emit(json!({
        "command": "crc-calibrate",
        "version": artifact::VERSION,
        "config_sha256": hash,
        "n": n,
        "alpha": args.alpha,
        "lambda_hat": calibration.lambda_hat(),
        "risk_bound": calibration.bound(),
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

pub fn split_predict(args: PredictArgs) -> Result<(), CliError> {
    let calibration: artifact::Artifact<split::SplitCalibration> =
        artifact::load_artifact(&args.calibration)?;
    let graph = at_path(io::load_graph(&args.graph), &args.graph)?;
    let (probs, _) = load_scores(&args.input)?;
    let map = ClassMap::new(&graph, probs.class_names())?;
    let sets = calibration.payload.predict_all(&probs)?;
    predict_output("split-predict", &args, &map, &probs, &sets, &calibration.config_sha256)
}

pub fn crc_predict(args: PredictArgs) -> Result<(), CliError> {
    let calibration: artifact::Artifact<crc::LambdaCalibration> =
        artifact::load_artifact(&args.calibration)?;
    let graph = at_path(io::load_graph(&args.graph), &args.graph)?;
    let (probs, _) = load_scores(&args.input)?;
    let map = ClassMap::new(&graph, probs.class_names())?;
    let sets = calibration.payload.predict_all(&map, &probs)?;
    predict_output("crc-predict", &args, &map, &probs, &sets, &calibration.config_sha256)
}

fn predict_output(
    command: &str,
    args: &PredictArgs,
    map: &ClassMap,
    probs: &ProbMatrix,
    sets: &[PredictionSet],
    calibration_hash: &str,
) -> Result<(), CliError> {
    let effective = json!({
        "command": command,
        "calibration_config_sha256": calibration_hash,
        "probs": args.input.probs.as_ref().map(|p| p.display().to_string()),
        "features": args.input.features.as_ref().map(|p| p.display().to_string()),
        "model": args.input.model.as_ref().map(|p| p.display().to_string()),
        "graph": args.graph.display().to_string(),
    });
    let hash = artifact::config_hash(&effective);
    let records = set_records(map, probs, sets);
    let meta = write_sets(&args.out, &records, &hash)?;

    emit(json!({
        "command": command,
        "version": artifact::VERSION,
        "config_sha256": hash,
        "n": records.len(),
        "mean_size": meta.mean_size,
        "mean_homogeneity": meta.mean_homogeneity,
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// correct
// ---------------------------------------------------------------------------

pub fn correct(args: CorrectArgs) -> Result<(), CliError> {
    let method = parse_method(&args.method)?;
    let estimator = parse_estimator(&args.estimator)?;
    let seed = artifact::resolve_seed(args.seed, 0)?;

    let graph = at_path(io::load_graph(&args.graph), &args.graph)?;
    let calib_file = at_path(io::read_probs_csv(&args.calib_probs), &args.calib_probs)?;
    let calib_labels = resolve_labels(&args.calib_labels, calib_file.labels, "correct")?;
    let test_file = at_path(io::read_probs_csv(&args.test_probs), &args.test_probs)?;
    let map = ClassMap::new(&graph, test_file.probs.class_names())?;
    let calib = LabeledBatch::new(calib_file.probs, &calib_labels)?;

    let effective = json!({
        "command": "correct",
        "graph": args.graph.display().to_string(),
        "calib_probs": args.calib_probs.display().to_string(),
        "calib_labels": args.calib_labels.as_ref().map(|p| p.display().to_string()),
        "test_probs": args.test_probs.display().to_string(),
        "test_labels": args.test_labels.as_ref().map(|p| p.display().to_string()),
        "alpha": args.alpha,
        "method": args.method,
        "correction": args.correction,
        "estimator": args.estimator,
        "seed": seed,
    });
    let hash = artifact::config_hash(&effective);

    let (sets, audit) = match args.correction.as_str() {
        "two_fold" => {
            let (sets, plan) = shift::two_fold_correct_with(
                &graph,
                &calib,
                &test_file.probs,
                args.alpha,
                method,
                estimator,
                seed,
            )?;
            if let Some(path) = &args.audit_out {
                artifact::save_artifact(path, &hash, &plan)?;
            }
            let (fold1, fold2) = plan.fold_sizes();
            let audit = json!({
                "fold_sizes": [fold1, fold2],
                "estimated_props_per_fold": plan.estimated_props_per_fold,
                "resample_counts_per_fold": plan.resample_counts_per_fold,
                "resample_size": plan.resample_size,
                "seed": plan.seed,
            });
            (sets, audit)
        }
        "oracle" => {
            let labels_path = args.test_labels.as_ref().ok_or_else(|| {
                CliError::Config("--correction oracle requires --test-labels".into())
            })?;
            let test_labels = at_path(io::read_labels(labels_path), labels_path)?;
            let test = LabeledBatch::new(test_file.probs.clone(), &test_labels)?;
            let sets = shift::oracle_correct(&graph, &calib, &test, args.alpha, method, seed)?;
            (sets, json!(null))
        }
        other => {
            return Err(CliError::Config(format!(
                "--correction must be \"two_fold\" or \"oracle\", got {other:?}"
            )))
        }
    };

    let records = set_records(&map, &test_file.probs, &sets);
    let meta = write_sets(&args.out, &records, &hash)?;

    emit(json!({
        "command": "correct",
        "version": artifact::VERSION,
        "config_sha256": hash,
        "n": records.len(),
        "method": args.method,
        "correction": args.correction,
        "mean_size": meta.mean_size,
        "audit": audit,
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn rebuild_set(class_names: &[String], record: &SetRecord) -> Result<PredictionSet, CliError> {
    let classes = record
        .leaves
        .iter()
        .map(|leaf| {
            class_names.binary_search(leaf).map(|c| c as u32).map_err(|_| {
                CliError::Data(format!(
                    "set {:?}: leaf {leaf:?} is not a leaf of the graph",
                    record.id
                ))
            })
        })
        .collect::<Result<Vec<u32>, CliError>>()?;
    Ok(PredictionSet::from_classes(classes))
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let graph = at_path(io::load_graph(&args.graph), &args.graph)?;
    let records = at_path(io::read_sets_jsonl(&args.sets), &args.sets)?;
    let truth = at_path(io::read_labels(&args.labels), &args.labels)?;

    let class_names = leaf_class_names(&graph);
    let map = ClassMap::new(&graph, &class_names)?;
    let sets = records
        .iter()
        .map(|r| rebuild_set(&class_names, r))
        .collect::<Result<Vec<PredictionSet>, CliError>>()?;
    let report = eval::evaluate(&map, &sets, &truth)?;

    let effective = json!({
        "command": "evaluate",
        "sets": args.sets.display().to_string(),
        "labels": args.labels.display().to_string(),
        "graph": args.graph.display().to_string(),
    });
    let hash = artifact::config_hash(&effective);
    artifact::save_artifact(&args.out, &hash, &report)?;

    emit(json!({
        "command": "evaluate",
        "version": artifact::VERSION,
        "config_sha256": hash,
        "n": report.n,
        "coverage": report.coverage,
        "mean_size": report.mean_size,
        "mean_homogeneity": report.mean_homogeneity,
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// study
// ---------------------------------------------------------------------------

/// Bin width of the coverage histogram dump; 0.005 resolves the Beta law's
/// spread at calibration sizes in the hundreds-to-thousands range.
const HIST_BIN_WIDTH: f64 = 0.005;

fn write_hist(path: &Path, coverages: &[f64]) -> Result<(), CliError> {
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for &c in coverages {
        *bins.entry((c / HIST_BIN_WIDTH).floor() as i64).or_default() += 1;
    }
    let mut out = String::from("# per-trial coverage histogram\n# bin_center count\n");
    for (bin, count) in bins {
        let center = (bin as f64 + 0.5) * HIST_BIN_WIDTH;
        out.push_str(&format!("{center} {count}\n"));
    }
    fs::write(path, out).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn study(args: StudyArgs) -> Result<(), CliError> {
    let scenario: StudyScenario = artifact::load_config(&args.scenario)?;
    let seed = artifact::resolve_seed(args.seed, 0)?;

    let effective = json!({
        "command": "study",
        "scenario": &scenario,
        "trials": args.trials,
        "seed": seed,
    });
    let hash = artifact::config_hash(&effective);

    let study = eval::run_study(&scenario, args.trials, seed)?;
    artifact::save_artifact(&args.out, &hash, &study)?;
    if let Some(path) = &args.emit_hist {
        write_hist(path, &study.per_trial_coverage)?;
    }

    emit(json!({
        "command": "study",
        "version": artifact::VERSION,
        "config_sha256": hash,
        "trials": study.trials,
        "seed": seed,
        "mean_coverage": study.mean_coverage,
        "mean_size": study.mean_size,
        "mean_homogeneity": study.mean_homogeneity,
        "ks_statistic_vs_beta": study.ks_statistic_vs_beta,
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

pub fn pipeline(args: PipelineArgs) -> Result<(), CliError> {
    let mut cfg: RunConfig = artifact::load_config(&args.config)?;
    cfg.seed = artifact::resolve_seed(args.seed, cfg.seed)?;
    if cfg.features.is_some() == cfg.probs.is_some() {
        return Err(CliError::Config(
            "set exactly one of \"features\" or \"probs\" in the run configuration".into(),
        ));
    }
    let hash = artifact::config_hash(&cfg);
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg.out_dir.display())))?;

    let graph = at_path(io::load_graph(&cfg.graph), &cfg.graph)?;

    // Load the full table once; everything downstream works on row subsets.
    enum Rows {
        Features(FeatureMatrix),
        Probs(ProbMatrix),
    }
    let (rows, embedded) = match (&cfg.features, &cfg.probs) {
        (Some(path), None) => {
            let file = at_path(io::read_features_csv(path), path)?;
            (Rows::Features(file.features), file.labels)
        }
        (None, Some(path)) => {
            let file = at_path(io::read_probs_csv(path), path)?;
            (Rows::Probs(file.probs), file.labels)
        }
        _ => unreachable!("validated above"),
    };
    let labels = match &cfg.labels {
        Some(path) => at_path(io::read_labels(path), path)?,
        None => embedded.ok_or_else(|| {
            CliError::Config(
                "labels required: set \"labels\" or include a label column in the input CSV"
                    .into(),
            )
        })?,
    };
    let (n, ids) = match &rows {
        Rows::Features(x) => (x.n_rows(), x.ids().map(<[String]>::to_vec)),
        Rows::Probs(p) => (p.n_rows(), p.ids().map(<[String]>::to_vec)),
    };
    if labels.len() != n {
        return Err(CliError::Data(format!(
            "label count {} does not match the {n} input rows",
            labels.len()
        )));
    }

    // Deterministic three-way split: shuffle row indices, then cut.
    let n_train = match rows {
        Rows::Features(_) => cfg.n_train,
        Rows::Probs(_) => 0,
    };
    let reserved = n_train + cfg.n_calib;
    if n <= reserved {
        return Err(CliError::Data(format!(
            "need more than {reserved} rows (train {n_train} + calibrate {}) \
             to leave a test set, got {n}",
            cfg.n_calib
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_SALT));
    order.shuffle(&mut rng);
    let train_idx = &order[..n_train];
    let calib_idx = &order[n_train..reserved];
    let test_idx = &order[reserved..];

    let model_path = cfg.out_dir.join("model.json");
    let calibration_path = cfg.out_dir.join("calibration.json");
    let sets_path = cfg.out_dir.join("sets.jsonl");
    let report_path = cfg.out_dir.join("report.json");

    // Score the calibration and test rows, fitting the classifier first
    // when raw features were supplied.
    let mut model_written = false;
    let (calib_probs, test_probs) = match &rows {
        Rows::Features(x) => {
            let train_x = subset_features(x, train_idx)?;
            let train_y = gather(&labels, train_idx);
            let selected = select_top_variance(&train_x, cfg.k_features)?;
            let train_sel = train_x.select_features(&selected)?;
            let model = fit_logit(&train_sel, &train_y, cfg.l2, cfg.max_iter, cfg.tol)?;
            artifact::save_artifact(&model_path, &hash, &model)?;
            model_written = true;
            let calib = model.predict_probs(&subset_features(x, calib_idx)?)?;
            let test = model.predict_probs(&subset_features(x, test_idx)?)?;
            (calib, test)
        }
        Rows::Probs(p) => (subset_probs(p, calib_idx)?, subset_probs(p, test_idx)?),
    };
    let test_probs = test_probs.with_ids(subset_ids(ids.as_deref(), test_idx))?;

    let class_names = calib_probs.class_names().to_vec();
    let map = ClassMap::new(&graph, &class_names)?;
    let calib_batch = LabeledBatch::new(calib_probs, &gather(&labels, calib_idx))?;
    let test_labels = gather(&labels, test_idx);

    // The calibration artifact always records the uncorrected fit;
    // corrections re-calibrate internally per fold.
    let mut uncorrected: Option<Vec<PredictionSet>> = None;
    match cfg.method {
        ConformalMethod::Split => {
            let calibration = split::calibrate(&calib_batch, cfg.alpha)?;
            artifact::save_artifact(&calibration_path, &hash, &calibration)?;
            if cfg.correction == Correction::None {
                uncorrected = Some(calibration.predict_all(&test_probs)?);
            }
        }
        ConformalMethod::Graph => {
            let calibration = crc::calibrate(&map, &calib_batch, cfg.alpha, 1.0)?;
            artifact::save_artifact(&calibration_path, &hash, &calibration)?;
            if cfg.correction == Correction::None {
                uncorrected = Some(calibration.predict_all(&map, &test_probs)?);
            }
        }
    }

    let mut audit_path = None;
    let mut audit_summary = json!(null);
    let sets = match cfg.correction {
        Correction::None => uncorrected.expect("computed in the method match above"),
        Correction::TwoFold => {
            let (sets, plan) = shift::two_fold_correct_with(
                &graph,
                &calib_batch,
                &test_probs,
                cfg.alpha,
                cfg.method,
                cfg.estimator,
                derive_seed(cfg.seed, CORRECTION_SALT),
            )?;
            let path = cfg.out_dir.join("audit.json");
            artifact::save_artifact(&path, &hash, &plan)?;
            let (fold1, fold2) = plan.fold_sizes();
            audit_summary = json!({
                "fold_sizes": [fold1, fold2],
                "estimated_props_per_fold": plan.estimated_props_per_fold,
                "resample_counts_per_fold": plan.resample_counts_per_fold,
                "resample_size": plan.resample_size,
            });
            audit_path = Some(path);
            sets
        }
        Correction::Oracle => {
            let test_batch = LabeledBatch::new(test_probs.clone(), &test_labels)?;
            shift::oracle_correct(
                &graph,
                &calib_batch,
                &test_batch,
                cfg.alpha,
                cfg.method,
                derive_seed(cfg.seed, CORRECTION_SALT),
            )?
        }
    };

    let records = set_records(&map, &test_probs, &sets);
    write_sets(&sets_path, &records, &hash)?;
    let report = eval::evaluate(&map, &sets, &test_labels)?;
    artifact::save_artifact(&report_path, &hash, &report)?;

    emit(json!({
        "command": "pipeline",
        "version": artifact::VERSION,
        "config_sha256": hash,
        "seed": cfg.seed,
        "n_train": n_train,
        "n_calib": cfg.n_calib,
        "n_test": test_idx.len(),
        "coverage": report.coverage,
        "mean_size": report.mean_size,
        "mean_homogeneity": report.mean_homogeneity,
        "audit": audit_summary,
        "artifacts": {
            "model": model_written.then(|| model_path.display().to_string()),
            "calibration": calibration_path.display().to_string(),
            "sets": sets_path.display().to_string(),
            "report": report_path.display().to_string(),
            "audit": audit_path.map(|p| p.display().to_string()),
        },
    }));
    Ok(())
}
