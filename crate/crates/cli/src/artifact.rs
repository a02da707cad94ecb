//! Provenance-stamped JSON artifacts, error taxonomy, and seed resolution.
//!
//! Every artifact this tool writes carries the tool name, version, and a
//! SHA-256 hash of the effective run configuration, so any output can be
//! traced back to the exact invocation that produced it.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hiconform_core::classifier::ClassifierError;
use hiconform_core::crc::CrcError;
use hiconform_core::eval::EvalError;
use hiconform_core::graph::GraphError;
use hiconform_core::io::IoError;
use hiconform_core::scores::ScoreError;
use hiconform_core::shift::ShiftError;
use hiconform_core::split::SplitError;
use hiconform_core::synth::SynthError;

pub const TOOL: &str = "hiconform";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Process-level error classes, each with its own exit code: bad
/// configuration (1), unusable data (2), statistically infeasible
/// calibration (3).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Infeasible(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Infeasible(_) => "calibration",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Infeasible(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Infeasible(m) => m,
        }
    }

    /// One-line machine-readable form, printed to stderr before exiting.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": { "kind": self.kind(), "message": self.message() }
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ScoreError> for CliError {
    fn from(e: ScoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SplitError> for CliError {
    fn from(e: SplitError) -> Self {
        match e {
            SplitError::CalibrationTooSmall { .. } => CliError::Infeasible(e.to_string()),
            SplitError::InvalidAlpha(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CrcError> for CliError {
    fn from(e: CrcError) -> Self {
        match e {
            CrcError::BoundUnachievable { .. } => CliError::Infeasible(e.to_string()),
            CrcError::InvalidAlpha(_) | CrcError::InvalidLossBound(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ShiftError> for CliError {
    fn from(e: ShiftError) -> Self {
        match e {
            ShiftError::Split(inner) => inner.into(),
            ShiftError::Crc(inner) => inner.into(),
            ShiftError::InvalidProps(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::InvalidHyper(_) | ClassifierError::KTooLarge { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) | SynthError::InvalidProps(_) => {
                CliError::Config(e.to_string())
            }
            SynthError::Classifier(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Split(inner) => inner.into(),
            EvalError::Crc(inner) => inner.into(),
            EvalError::Shift(inner) => inner.into(),
            EvalError::Classifier(inner) => inner.into(),
            EvalError::Synth(inner) => inner.into(),
            EvalError::InvalidAlpha(_) | EvalError::NoTrials => CliError::Config(e.to_string()),
            EvalError::DegenerateL { .. } => CliError::Infeasible(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Envelope for every JSON artifact written to disk.
#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub payload: T,
}

/// Hex SHA-256 of the canonical JSON form of the effective configuration.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serialization cannot fail");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Writes an artifact as pretty-printed JSON with a trailing newline.
pub fn save_artifact<T: Serialize>(
    path: &Path,
    config_sha256: &str,
    payload: T,
) -> Result<(), CliError> {
    let artifact = Artifact {
        tool: TOOL.to_string(),
        version: VERSION.to_string(),
        config_sha256: config_sha256.to_string(),
        payload,
    };
    let mut bytes = serde_json::to_vec_pretty(&artifact)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    bytes.push(b'\n');
    fs::write(path, bytes)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Loads an artifact written by [`save_artifact`], checking the tool field.
pub fn load_artifact<T: DeserializeOwned>(path: &Path) -> Result<Artifact<T>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let artifact: Artifact<T> = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if artifact.tool != TOOL {
        return Err(CliError::Data(format!(
            "{}: written by {:?}, not {TOOL:?}",
            path.display(),
            artifact.tool
        )));
    }
    Ok(artifact)
}

/// Reads a JSON configuration file; parse problems are configuration errors.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Effective seed: the `HICONFORM_SEED` environment variable trumps the
/// command-line flag, which trumps the configured fallback.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, CliError> {
    match std::env::var("HICONFORM_SEED") {
        Ok(raw) => raw.trim().parse().map_err(|_| {
            CliError::Config(format!("HICONFORM_SEED must be an unsigned integer, got {raw:?}"))
        }),
        Err(_) => Ok(flag.unwrap_or(fallback)),
    }
}
