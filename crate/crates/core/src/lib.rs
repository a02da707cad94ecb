//! Hierarchy-aware conformal classification.
//!
//! This crate turns a probabilistic classifier over the leaves of a label
//! DAG into set-valued predictions with distribution-free coverage
//! guarantees, and keeps those guarantees honest when deployment class
//! frequencies drift from calibration.

pub mod classifier;
pub mod crc;
pub mod eval;
pub mod graph;
pub mod io;
pub mod scores;
pub mod sets;
pub mod shift;
pub mod split;
pub mod stats;
pub mod synth;

pub use classifier::{ClassifierError, FeatureMatrix, LogitModel, TrainingLog};
pub use crc::{CrcError, LambdaCalibration};
pub use eval::{
    Correction, CoverageStudy, EvalError, EvalReport, LogitParams, ModelKind, StudyScenario,
};
pub use graph::{GraphError, LabelGraph, NodeId, NodeSet};
pub use io::{FeaturesFile, IoError, ProbsFile, SetRecord};
pub use scores::{ClassMap, LabeledBatch, ProbMatrix, ScoreError};
pub use sets::PredictionSet;
pub use shift::{
    ConformalMethod, PropEstimator, ShiftCorrectionPlan, ShiftError,
};
pub use split::{SplitCalibration, SplitError};
pub use synth::{Generator, GraphSpec, SynthConfig, SynthError};
