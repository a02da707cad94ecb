//! End-to-end tests of the `hiconform` binary: every subcommand is driven
//! through a real process so the stdout/stderr/exit-code contract is pinned
//! exactly as scripts and workflow engines consume it.
//!
//! Contract under test:
//! - success prints exactly one JSON summary line on stdout;
//! - failures print one `{"error":{"kind","message"}}` line on stderr and
//!   exit 1 (config), 2 (data), or 3 (calibration infeasible);
//! - artifacts embed tool name, version, and the config hash;
//! - identical config + seed reproduces artifacts byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hiconform"));
    // Keep tests hermetic: the ambient environment must not inject a seed.
    cmd.env_remove("HICONFORM_SEED");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to launch hiconform binary")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    let text = String::from_utf8(out.stdout.clone()).expect("stdout is not UTF-8");
    let mut lines = text.lines();
    let line = lines.next().expect("no stdout summary line");
    assert_eq!(lines.next(), None, "expected exactly one stdout line, got: {text}");
    serde_json::from_str(line).expect("stdout summary is not JSON")
}

fn stderr_error(out: &Output, want_code: i32) -> Value {
    assert_eq!(
        out.status.code(),
        Some(want_code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    let text = String::from_utf8(out.stderr.clone()).expect("stderr is not UTF-8");
    let parsed: Value =
        serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"));
    parsed["error"].clone()
}

fn write_json(path: &Path, value: &Value) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn read_json(path: &Path) -> Value {
    let bytes = fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn assert_artifact(path: &Path) -> Value {
    let v = read_json(path);
    assert_eq!(v["tool"], "hiconform", "{}", path.display());
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"), "{}", path.display());
    let hash = v["config_sha256"].as_str().expect("config_sha256 missing");
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    v["payload"].clone()
}

/// A three-leaf, one-level population whose features separate classes well
/// enough that small samples calibrate sensibly.
fn synth_config(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join("synth.json");
    write_json(
        &path,
        &serde_json::json!({
            "graph_spec": {"tree": {"depth": 1, "branching": 3}},
            "class_props": [0.4, 0.3, 0.3],
            "n_features": 4,
            "class_separation": 2.0,
            "seed": seed,
        }),
    );
    path
}

/// Runs `synth` and returns (data.csv, graph.tsv, probs.csv) paths.
fn synth_dataset(dir: &Path, seed: u64, n: usize) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = synth_config(dir, seed);
    let data = dir.join("data.csv");
    let graph = dir.join("graph.tsv");
    let probs = dir.join("probs.csv");
    let out = run(bin()
        .arg("synth")
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--n", &n.to_string()])
        .args(["--out", data.to_str().unwrap()])
        .args(["--graph-out", graph.to_str().unwrap()])
        .args(["--probs-out", probs.to_str().unwrap()]));
    stdout_json(&out);
    (data, graph, probs)
}

/// Extracts the `label` column (always written last) from a synth CSV.
fn labels_from_csv(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.ends_with(",label"), "header was: {header}");
    lines.map(|l| l.rsplit(',').next().unwrap().to_string()).collect()
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[test]
fn synth_writes_data_graph_and_posteriors() {
    let dir = TempDir::new().unwrap();
    let cfg = synth_config(dir.path(), 5);
    let data = dir.path().join("data.csv");
    let graph = dir.path().join("graph.tsv");
    let probs = dir.path().join("probs.csv");

    let out = run(bin()
        .arg("synth")
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--n", "50"])
        .args(["--out", data.to_str().unwrap()])
        .args(["--graph-out", graph.to_str().unwrap()])
        .args(["--probs-out", probs.to_str().unwrap()]));
    let summary = stdout_json(&out);

    assert_eq!(summary["command"], "synth");
    assert_eq!(summary["n"], 50);
    assert_eq!(summary["classes"], 3);
    assert_eq!(summary["seed"], 5);
    let hash = summary["config_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);

    let data_text = fs::read_to_string(&data).unwrap();
    let header = data_text.lines().next().unwrap();
    assert_eq!(header, "id,f000,f001,f002,f003,label");
    assert_eq!(data_text.lines().count(), 51);

    let graph_text = fs::read_to_string(&graph).unwrap();
    assert_eq!(graph_text.lines().count(), 3, "3 parent->leaf edges: {graph_text}");
    for line in graph_text.lines() {
        assert!(line.starts_with("n\tn."), "unexpected edge line {line:?}");
    }

    // Posterior rows are probability vectors over the three leaves.
    let probs_text = fs::read_to_string(&probs).unwrap();
    let prob_header = probs_text.lines().next().unwrap();
    assert_eq!(prob_header, "id,n.0,n.1,n.2,label");
    for line in probs_text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let total: f64 = fields[1..4].iter().map(|f| f.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9, "row does not sum to 1: {line}");
    }
}

#[test]
fn synth_seed_flag_overrides_config_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = synth_config(dir.path(), 5);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");

    for (path, seed) in [(&a, None), (&b, Some(11u64)), (&c, Some(11u64))] {
        let mut cmd = bin();
        cmd.arg("synth")
            .args(["--config", cfg.to_str().unwrap()])
            .args(["--n", "30"])
            .args(["--out", path.to_str().unwrap()]);
        if let Some(s) = seed {
            cmd.args(["--seed", &s.to_string()]);
        }
        let summary = stdout_json(&run(&mut cmd));
        assert_eq!(summary["seed"], seed.unwrap_or(5));
    }
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "seed 11 must differ from seed 5");
    assert_eq!(fs::read(&b).unwrap(), fs::read(&c).unwrap(), "same seed must reproduce bytes");
}

// ---------------------------------------------------------------------------
// train / calibrate / predict / evaluate chain
// ---------------------------------------------------------------------------

#[test]
fn train_calibrate_predict_evaluate_chain() {
    let dir = TempDir::new().unwrap();
    let (data, graph, _) = synth_dataset(dir.path(), 3, 300);
    let model = dir.path().join("model.json");
    let calibration = dir.path().join("calibration.json");
    let sets = dir.path().join("sets.jsonl");
    let report = dir.path().join("report.json");

    let out = run(bin()
        .arg("train")
        .args(["--features", data.to_str().unwrap()])
        .args(["--k-features", "4"])
        .args(["--out", model.to_str().unwrap()]));
    let summary = stdout_json(&out);
    assert_eq!(summary["command"], "train");
    assert_eq!(summary["rows"], 300);
    assert_eq!(summary["classes"], 3);
    let payload = assert_artifact(&model);
    assert_eq!(payload["classes"].as_array().unwrap().len(), 3);

    let out = run(bin()
        .arg("split-calibrate")
        .args(["--features", data.to_str().unwrap()])
        .args(["--model", model.to_str().unwrap()])
        .args(["--alpha", "0.2"])
        .args(["--out", calibration.to_str().unwrap()]));
    let summary = stdout_json(&out);
    let q_hat = summary["q_hat"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&q_hat), "q_hat out of range: {q_hat}");
    assert_eq!(summary["n"], 300);
    assert_artifact(&calibration);

    let out = run(bin()
        .arg("split-predict")
        .args(["--calibration", calibration.to_str().unwrap()])
        .args(["--features", data.to_str().unwrap()])
        .args(["--model", model.to_str().unwrap()])
        .args(["--graph", graph.to_str().unwrap()])
        .args(["--out", sets.to_str().unwrap()]));
    let summary = stdout_json(&out);
    assert_eq!(summary["n"], 300);
    assert!(summary["mean_size"].as_f64().unwrap() >= 1.0);

    // Each JSONL record carries the set plus its graph summary; plain
    // split sets have no anchor node, so that key is absent here.
    let first: Value =
        serde_json::from_str(fs::read_to_string(&sets).unwrap().lines().next().unwrap()).unwrap();
    for key in ["id", "leaves", "size", "homogeneity"] {
        assert!(first.get(key).is_some(), "sets record missing {key}: {first}");
    }
    assert!(first.get("anchor").is_none(), "split sets are anchor-free: {first}");
    let meta = assert_artifact(&dir.path().join("sets.jsonl.meta.json"));
    assert_eq!(meta["records"], 300);

    let labels_path = dir.path().join("labels.txt");
    fs::write(&labels_path, labels_from_csv(&data).join("\n")).unwrap();
    let out = run(bin()
        .arg("evaluate")
        .args(["--sets", sets.to_str().unwrap()])
        .args(["--labels", labels_path.to_str().unwrap()])
        .args(["--graph", graph.to_str().unwrap()])
        .args(["--out", report.to_str().unwrap()]));
    let summary = stdout_json(&out);
    // In-sample at alpha = 0.2 with well-separated classes: coverage is
    // far from zero and mean size is a sane set size.
    let coverage = summary["coverage"].as_f64().unwrap();
    assert!(coverage > 0.6, "implausibly low in-sample coverage {coverage}");
    let payload = assert_artifact(&report);
    assert_eq!(payload["n"], 300);
    assert!(payload["per_class_coverage"].is_object());
}

#[test]
fn crc_calibrate_then_predict_covers_labels() {
    let dir = TempDir::new().unwrap();
    let (data, graph, probs) = synth_dataset(dir.path(), 7, 200);
    let calibration = dir.path().join("crc.json");
    let sets = dir.path().join("sets.jsonl");

    let out = run(bin()
        .arg("crc-calibrate")
        .args(["--probs", probs.to_str().unwrap()])
        .args(["--graph", graph.to_str().unwrap()])
        .args(["--alpha", "0.2"])
        .args(["--out", calibration.to_str().unwrap()]));
    let summary = stdout_json(&out);
    let lambda_hat = summary["lambda_hat"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&lambda_hat));
    assert!(summary["risk_bound"].as_f64().unwrap() <= 0.2);
    let payload = assert_artifact(&calibration);
    assert_eq!(payload["alpha"], 0.2);

    let out = run(bin()
        .arg("crc-predict")
        .args(["--calibration", calibration.to_str().unwrap()])
        .args(["--probs", probs.to_str().unwrap()])
        .args(["--graph", graph.to_str().unwrap()])
        .args(["--out", sets.to_str().unwrap()]));
    let summary = stdout_json(&out);
    assert_eq!(summary["command"], "crc-predict");
    assert_eq!(summary["n"], 200);

    // Sets live on graph leaves, ids line up with the input rows, and
    // graph sets name the ancestor node that anchored them.
    let text = fs::read_to_string(&sets).unwrap();
    assert_eq!(text.lines().count(), 200);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "r0");
    assert!(first["anchor"].is_string(), "graph sets carry an anchor: {first}");
    drop(data);
}

#[test]
fn predict_rejects_mismatched_calibration_artifact() {
    let dir = TempDir::new().unwrap();
    let (_, graph, probs) = synth_dataset(dir.path(), 7, 60);
    let crc = dir.path().join("crc.json");
    let sets = dir.path().join("sets.jsonl");

    stdout_json(&run(bin()
        .arg("crc-calibrate")
        .args(["--probs", probs.to_str().unwrap()])
        .args(["--graph", graph.to_str().unwrap()])
        .args(["--out", crc.to_str().unwrap()])));

    // A graph calibration artifact has no split quantile: split-predict
    // must refuse it as malformed input data, not crash or mis-predict.
    let out = run(bin()
        .arg("split-predict")
        .args(["--calibration", crc.to_str().unwrap()])
        .args(["--probs", probs.to_str().unwrap()])
        .args(["--graph", graph.to_str().unwrap()])
        .args(["--out", sets.to_str().unwrap()]));
    let err = stderr_error(&out, 2);
    assert_eq!(err["kind"], "data");
}

// ---------------------------------------------------------------------------
// correct
// ---------------------------------------------------------------------------

#[test]
fn correct_emits_two_fold_audit() {
    let dir = TempDir::new().unwrap();
    // Same population, shifted class marginal: a genuine label-shift pair.
    let src_cfg = dir.path().join("src.json");
    let tgt_cfg = dir.path().join("tgt.json");
    write_json(
        &src_cfg,
        &serde_json::json!({
            "graph_spec": {"tree": {"depth": 1, "branching": 3}},
            "class_props": [0.6, 0.2, 0.2],
            "n_features": 4,
            "class_separation": 2.0,
            "seed": 13,
        }),
    );
    write_json(
        &tgt_cfg,
        &serde_json::json!({
            "graph_spec": {"tree": {"depth": 1, "branching": 3}},
            "class_props": [0.2, 0.2, 0.6],
            "n_features": 4,
            "class_separation": 2.0,
            "seed": 13,
        }),
    );
    let graph = dir.path().join("graph.tsv");
    let calib_probs = dir.path().join("calib_probs.csv");
    let test_probs = dir.path().join("test_probs.csv");
    stdout_json(&run(bin()
        .arg("synth")
        .args(["--config", src_cfg.to_str().unwrap()])
        .args(["--n", "200"])
        .args(["--out", dir.path().join("calib.csv").to_str().unwrap()])
        .args(["--graph-out", graph.to_str().unwrap()])
        .args(["--probs-out", calib_probs.to_str().unwrap()])));
    stdout_json(&run(bin()
        .arg("synth")
        .args(["--config", tgt_cfg.to_str().unwrap()])
        .args(["--n", "150"])
        .args(["--out", dir.path().join("test.csv").to_str().unwrap()])
        .args(["--probs-out", test_probs.to_str().unwrap()])));

    let sets = dir.path().join("sets.jsonl");
    let audit = dir.path().join("audit.json");
    let out = run(bin()
        .arg("correct")
        .args(["--graph", graph.to_str().unwrap()])
        .args(["--calib-probs", calib_probs.to_str().unwrap()])
        .args(["--test-probs", test_probs.to_str().unwrap()])
        .args(["--alpha", "0.2"])
        .args(["--seed", "4"])
        .args(["--out", sets.to_str().unwrap()])
        .args(["--audit-out", audit.to_str().unwrap()]));
    let summary = stdout_json(&out);
    assert_eq!(summary["correction"], "two_fold");
    assert_eq!(summary["n"], 150);

    // The audit discloses exactly what the correction resampled. Folds
    // partition the 150 test rows; the calibration set is resampled to the
    // proportions each fold sees in the other.
    let a = &summary["audit"];
    let folds = a["fold_sizes"].as_array().unwrap();
    let (f1, f2) = (folds[0].as_u64().unwrap(), folds[1].as_u64().unwrap());
    assert_eq!(f1 + f2, 150);
    assert!(f1.abs_diff(f2) <= 1);
    let props = a["estimated_props_per_fold"].as_array().unwrap();
    assert_eq!(props.len(), 2);
    for fold in props {
        let total: f64 = fold.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9, "fold proportions must sum to 1: {fold}");
    }
    assert_eq!(a["seed"], 4);

    let plan = assert_artifact(&audit);
    assert_eq!(plan["resample_size"], a["resample_size"]);
    assert_eq!(plan["fold_assignment"].as_array().unwrap().len(), 150);
}

#[test]
fn oracle_correction_requires_test_labels() {
    let dir = TempDir::new().unwrap();
    let (_, graph, probs) = synth_dataset(dir.path(), 7, 80);
    let out = run(bin()
        .arg("correct")
        .args(["--graph", graph.to_str().unwrap()])
        .args(["--calib-probs", probs.to_str().unwrap()])
        .args(["--test-probs", probs.to_str().unwrap()])
        .args(["--correction", "oracle"])
        .args(["--out", dir.path().join("s.jsonl").to_str().unwrap()]));
    let err = stderr_error(&out, 1);
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("--test-labels"));
}

#[test]
fn unknown_method_flag_exits_1() {
    let dir = TempDir::new().unwrap();
    let (_, graph, probs) = synth_dataset(dir.path(), 7, 40);
    let out = run(bin()
        .arg("correct")
        .args(["--graph", graph.to_str().unwrap()])
        .args(["--calib-probs", probs.to_str().unwrap()])
        .args(["--test-probs", probs.to_str().unwrap()])
        .args(["--method", "flat"])
        .args(["--out", dir.path().join("s.jsonl").to_str().unwrap()]));
    let err = stderr_error(&out, 1);
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("flat"));
}

// ---------------------------------------------------------------------------
// study
// ---------------------------------------------------------------------------

fn study_scenario(dir: &Path) -> PathBuf {
    let path = dir.join("scenario.json");
    write_json(
        &path,
        &serde_json::json!({
            "generator": {
                "graph_spec": {"tree": {"depth": 1, "branching": 3}},
                "class_props": [0.4, 0.3, 0.3],
                "n_features": 4,
                "class_separation": 1.5,
                "seed": 2,
            },
            "model": "bayes",
            "method": "split",
            "correction": "none",
            "alpha": 0.2,
            "n_calib": 80,
            "n_test": 200,
        }),
    );
    path
}

#[test]
fn study_writes_artifact_and_histogram() {
    let dir = TempDir::new().unwrap();
    let scenario = study_scenario(dir.path());
    let out_path = dir.path().join("study.json");
    let hist = dir.path().join("hist.dat");

    let out = run(bin()
        .arg("study")
        .args(["--scenario", scenario.to_str().unwrap()])
        .args(["--trials", "8"])
        .args(["--seed", "3"])
        .args(["--out", out_path.to_str().unwrap()])
        .args(["--emit-hist", hist.to_str().unwrap()]));
    let summary = stdout_json(&out);
    assert_eq!(summary["trials"], 8);
    assert_eq!(summary["seed"], 3);
    assert!(summary["ks_statistic_vs_beta"].is_number(), "split law has a KS reference");

    let payload = assert_artifact(&out_path);
    assert_eq!(payload["per_trial_coverage"].as_array().unwrap().len(), 8);
    assert_eq!(payload["n"], 80);
    assert_eq!(payload["beta_params"].as_array().unwrap().len(), 2);

    // gnuplot format: comment header, then "bin_center count" rows whose
    // counts add up to the number of trials.
    let text = fs::read_to_string(&hist).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# per-trial coverage histogram"));
    assert_eq!(lines.next(), Some("# bin_center count"));
    let total: u64 = lines.map(|l| l.split_whitespace().nth(1).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 8);
}

#[test]
fn thread_cap_does_not_change_study_results() {
    let dir = TempDir::new().unwrap();
    let scenario = study_scenario(dir.path());
    let one = dir.path().join("one.json");
    let two = dir.path().join("two.json");

    for (threads, path) in [("1", &one), ("2", &two)] {
        stdout_json(&run(bin()
            .args(["--threads", threads])
            .arg("study")
            .args(["--scenario", scenario.to_str().unwrap()])
            .args(["--trials", "6"])
            .args(["--seed", "3"])
            .args(["--out", path.to_str().unwrap()])));
    }
    assert_eq!(
        fs::read(&one).unwrap(),
        fs::read(&two).unwrap(),
        "trial scheduling must not leak into results"
    );
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

fn pipeline_config(dir: &Path, data: &Path, graph: &Path, extra: Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "graph": graph.to_str().unwrap(),
        "features": data.to_str().unwrap(),
        "alpha": 0.2,
        "method": "split",
        "correction": "none",
        "seed": 17,
        "k_features": 4,
        "n_train": 80,
        "n_calib": 80,
        "out_dir": dir.join("out").to_str().unwrap(),
    });
    for (k, v) in extra.as_object().cloned().unwrap_or_default() {
        cfg[k] = v;
    }
    let path = dir.join("run.json");
    write_json(&path, &cfg);
    path
}

#[test]
fn pipeline_writes_all_artifacts() {
    let dir = TempDir::new().unwrap();
    let (data, graph, _) = synth_dataset(dir.path(), 21, 400);
    let cfg = pipeline_config(dir.path(), &data, &graph, serde_json::json!({}));

    let out = run(bin().arg("pipeline").args(["--config", cfg.to_str().unwrap()]));
    let summary = stdout_json(&out);
    assert_eq!(summary["command"], "pipeline");
    assert_eq!(summary["seed"], 17);
    assert_eq!(summary["n_train"], 80);
    assert_eq!(summary["n_calib"], 80);
    assert_eq!(summary["n_test"], 240);
    assert!(summary["coverage"].as_f64().unwrap() > 0.5);
    assert!(summary["audit"].is_null(), "no correction, no audit");

    let out_dir = dir.path().join("out");
    let model = assert_artifact(&out_dir.join("model.json"));
    assert_eq!(model["classes"].as_array().unwrap().len(), 3);
    let calibration = assert_artifact(&out_dir.join("calibration.json"));
    assert!(calibration["q_hat"].is_number());
    let report = assert_artifact(&out_dir.join("report.json"));
    assert_eq!(report["n"], 240);
    let meta = assert_artifact(&out_dir.join("sets.jsonl.meta.json"));
    assert_eq!(meta["records"], 240);
    assert_eq!(fs::read_to_string(out_dir.join("sets.jsonl")).unwrap().lines().count(), 240);
    assert!(!out_dir.join("audit.json").exists());

    // Every artifact of one run carries the same config fingerprint.
    let hash = summary["config_sha256"].as_str().unwrap();
    for name in ["model.json", "calibration.json", "report.json", "sets.jsonl.meta.json"] {
        assert_eq!(read_json(&out_dir.join(name))["config_sha256"], hash, "{name}");
    }
}

#[test]
fn pipeline_two_fold_on_probabilities_writes_audit() {
    let dir = TempDir::new().unwrap();
    let (_, graph, probs) = synth_dataset(dir.path(), 23, 300);
    let cfg = pipeline_config(
        dir.path(),
        Path::new("unused"),
        &graph,
        serde_json::json!({
            "features": null,
            "probs": probs.to_str().unwrap(),
            "method": "graph",
            "correction": "two_fold",
            "n_calib": 150,
        }),
    );

    let out = run(bin().arg("pipeline").args(["--config", cfg.to_str().unwrap()]));
    let summary = stdout_json(&out);
    assert_eq!(summary["n_train"], 0, "probability input skips training");
    assert_eq!(summary["n_test"], 150);
    assert!(summary["audit"]["resample_size"].is_number());

    let out_dir = dir.path().join("out");
    assert!(!out_dir.join("model.json").exists(), "no model is fit from probabilities");
    assert!(summary["artifacts"]["model"].is_null());
    let plan = assert_artifact(&out_dir.join("audit.json"));
    assert_eq!(plan["fold_assignment"].as_array().unwrap().len(), 150);
    // Uncorrected graph calibration is still recorded for comparison.
    let calibration = assert_artifact(&out_dir.join("calibration.json"));
    assert!(calibration["lambda_hat"].is_number());
}

#[test]
fn pipeline_reruns_byte_identical() {
    let dir = TempDir::new().unwrap();
    let (data, graph, _) = synth_dataset(dir.path(), 29, 300);
    let cfg = pipeline_config(dir.path(), &data, &graph, serde_json::json!({}));
    let out_dir = dir.path().join("out");
    let names = ["model.json", "calibration.json", "sets.jsonl", "sets.jsonl.meta.json", "report.json"];

    let first = run(bin().arg("pipeline").args(["--config", cfg.to_str().unwrap()]));
    stdout_json(&first);
    let snapshot: Vec<Vec<u8>> = names.iter().map(|n| fs::read(out_dir.join(n)).unwrap()).collect();

    let second = run(bin().arg("pipeline").args(["--config", cfg.to_str().unwrap()]));
    stdout_json(&second);
    assert_eq!(first.stdout, second.stdout, "summary line must reproduce");
    for (name, before) in names.iter().zip(&snapshot) {
        let after = fs::read(out_dir.join(name)).unwrap();
        assert_eq!(&after, before, "{name} changed between identical runs");
    }
}

#[test]
fn seed_env_overrides_config_seed() {
    let dir = TempDir::new().unwrap();
    let (data, graph, _) = synth_dataset(dir.path(), 31, 300);
    let cfg = pipeline_config(dir.path(), &data, &graph, serde_json::json!({}));

    let out = run(bin()
        .env("HICONFORM_SEED", "99")
        .arg("pipeline")
        .args(["--config", cfg.to_str().unwrap()]));
    let summary = stdout_json(&out);
    assert_eq!(summary["seed"], 99, "environment beats the config file");

    let out = run(bin().env("HICONFORM_SEED", "not-a-number").arg("pipeline").args([
        "--config",
        cfg.to_str().unwrap(),
    ]));
    let err = stderr_error(&out, 1);
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("HICONFORM_SEED"));
}

#[test]
fn pipeline_rejects_both_features_and_probs() {
    let dir = TempDir::new().unwrap();
    let (data, graph, probs) = synth_dataset(dir.path(), 37, 120);
    let cfg = pipeline_config(
        dir.path(),
        &data,
        &graph,
        serde_json::json!({"probs": probs.to_str().unwrap()}),
    );
    let out = run(bin().arg("pipeline").args(["--config", cfg.to_str().unwrap()]));
    let err = stderr_error(&out, 1);
    assert_eq!(err["kind"], "config");
}

#[test]
fn missing_graph_file_exits_2_with_path() {
    let dir = TempDir::new().unwrap();
    let (data, _, _) = synth_dataset(dir.path(), 37, 120);
    let cfg = pipeline_config(dir.path(), &data, Path::new("/nonexistent/graph.tsv"), serde_json::json!({}));
    let out = run(bin().arg("pipeline").args(["--config", cfg.to_str().unwrap()]));
    let err = stderr_error(&out, 2);
    assert_eq!(err["kind"], "data");
    assert!(
        err["message"].as_str().unwrap().contains("/nonexistent/graph.tsv"),
        "error must name the offending file: {err}"
    );
}

#[test]
fn infeasible_calibration_exits_3() {
    let dir = TempDir::new().unwrap();
    let (data, graph, _) = synth_dataset(dir.path(), 41, 120);
    // alpha 0.1 needs ceil(0.9 * 6) = 6 <= 5 to fail: five calibration rows
    // cannot support a 90% guarantee.
    let cfg = pipeline_config(
        dir.path(),
        &data,
        &graph,
        serde_json::json!({"alpha": 0.1, "n_train": 60, "n_calib": 5}),
    );
    let out = run(bin().arg("pipeline").args(["--config", cfg.to_str().unwrap()]));
    let err = stderr_error(&out, 3);
    assert_eq!(err["kind"], "calibration");
}

#[test]
fn unknown_flag_exits_1_with_json_error() {
    let out = run(bin().arg("synth").arg("--no-such-flag"));
    let err = stderr_error(&out, 1);
    assert_eq!(err["kind"], "config");
}

#[test]
fn help_and_version_use_plain_text() {
    let out = run(bin().arg("--help"));
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "train", "split-calibrate", "crc-calibrate", "split-predict",
        "crc-predict", "correct", "evaluate", "study", "pipeline"]
    {
        assert!(text.contains(sub), "--help must list subcommand {sub}");
    }

    let out = run(bin().arg("--version"));
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}
