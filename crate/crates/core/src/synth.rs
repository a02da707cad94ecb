//! Synthetic data with a known hierarchical label law.
//!
//! The generator draws labels from a categorical distribution over the
//! leaves of a label graph and features from unit-variance Gaussians whose
//! means encode the hierarchy: every node gets a random unit direction,
//! and a leaf's mean is the scaled sum of the directions along its
//! ancestor chain. Sibling leaves therefore sit about `class_separation`
//! apart, and the spacing between two leaves grows with their undirected
//! graph distance (proportionally to its square root — the natural
//! Euclidean embedding of a tree metric). Confusion between nearby classes
//! is real, which is what makes hierarchy-aware prediction sets worth
//! measuring.
//!
//! Because the means depend only on the seed and the graph — never on the
//! class proportions — [`shift_props`] produces exact label shift: the
//! class-conditional feature law is bit-identical, only the marginal
//! changes.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, FeatureMatrix};
use crate::graph::{GraphError, LabelGraph};
use crate::scores::{ProbMatrix, ScoreError};

/// RNG stream for class-mean directions; distinct from sampling streams
/// so proportions can change without touching the feature law.
const MEANS_STREAM: u64 = 0x4d45414e;
/// RNG stream used by the one-shot [`generate`] convenience.
const GENERATE_STREAM: u64 = 1;

const PROPS_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("invalid proportion vector: {0}")]
    InvalidProps(String),
    #[error("feature matrix does not match this generator's feature names")]
    FeatureMismatch,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// How the label graph is specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSpec {
    /// Explicit parent → child edge list.
    Edges(Vec<(String, String)>),
    /// Complete tree with `branching^depth` leaves; nodes are named
    /// `n`, `n.0`, `n.0.1`, … so leaf order is deterministic.
    Tree { depth: usize, branching: usize },
}

impl GraphSpec {
    pub fn build(&self) -> Result<LabelGraph, SynthError> {
        match self {
            GraphSpec::Edges(edges) => {
                let borrowed: Vec<(&str, &str)> =
                    edges.iter().map(|(p, c)| (p.as_str(), c.as_str())).collect();
                Ok(LabelGraph::from_edges(&borrowed)?)
            }
            GraphSpec::Tree { depth, branching } => {
                if *depth == 0 || *branching == 0 {
                    return Err(SynthError::InvalidConfig(
                        "tree depth and branching must be at least 1".into(),
                    ));
                }
                let mut edges = Vec::new();
                let mut frontier = vec!["n".to_string()];
                for _ in 0..*depth {
                    let mut next = Vec::new();
                    for parent in &frontier {
                        for b in 0..*branching {
                            let child = format!("{parent}.{b}");
                            edges.push((parent.clone(), child.clone()));
                            next.push(child);
                        }
                    }
                    frontier = next;
                }
                if frontier.len() < 2 {
                    return Err(SynthError::InvalidConfig(
                        "tree must produce at least 2 leaves".into(),
                    ));
                }
                let borrowed: Vec<(&str, &str)> =
                    edges.iter().map(|(p, c)| (p.as_str(), c.as_str())).collect();
                Ok(LabelGraph::from_edges(&borrowed)?)
            }
        }
    }
}

/// Full description of a synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub graph_spec: GraphSpec,
    /// Class marginal, aligned to the lexicographically sorted leaf names.
    pub class_props: Vec<f64>,
    pub n_features: usize,
    /// Approximate distance between sibling class means, in noise
    /// standard deviations. Zero makes the features uninformative.
    pub class_separation: f64,
    pub seed: u64,
}

fn validate_props(props: &[f64], k: usize) -> Result<(), SynthError> {
    if props.len() != k {
        return Err(SynthError::InvalidProps(format!(
            "expected {k} entries (one per leaf), got {}",
            props.len()
        )));
    }
    if props.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(SynthError::InvalidProps("entries must be finite and non-negative".into()));
    }
    let total: f64 = props.iter().sum();
    if (total - 1.0).abs() > PROPS_SUM_TOLERANCE {
        return Err(SynthError::InvalidProps(format!("entries sum to {total}, expected 1")));
    }
    Ok(())
}

/// Instantiated generator: graph built, class means materialized.
#[derive(Debug)]
pub struct Generator {
    graph: LabelGraph,
    class_names: Vec<String>,
    feature_names: Vec<String>,
    /// K × p class-conditional means.
    means: Vec<Vec<f64>>,
    props: Vec<f64>,
    seed: u64,
}

impl Generator {
    pub fn new(cfg: &SynthConfig) -> Result<Self, SynthError> {
        if cfg.n_features == 0 {
            return Err(SynthError::InvalidConfig("n_features must be at least 1".into()));
        }
        if !(cfg.class_separation >= 0.0) || !cfg.class_separation.is_finite() {
            return Err(SynthError::InvalidConfig(format!(
                "class_separation must be finite and non-negative, got {}",
                cfg.class_separation
            )));
        }
        let graph = cfg.graph_spec.build()?;
        let mut class_names: Vec<String> =
            graph.leaves().iter().map(|&l| graph.name(l).to_string()).collect();
        class_names.sort();
        validate_props(&cfg.class_props, class_names.len())?;

        // One unit direction per node, drawn in sorted-name order so the
        // assignment is independent of graph construction order.
        let p = cfg.n_features;
        let mut node_names: Vec<&str> =
            (0..graph.node_count()).map(|v| graph.name(crate::graph::NodeId(v as u32))).collect();
        node_names.sort();
        let mut dir_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        dir_rng.set_stream(MEANS_STREAM);
        let mut directions = std::collections::HashMap::new();
        for name in node_names {
            let mut dir: Vec<f64> = (0..p).map(|_| dir_rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut dir {
                    *v /= norm;
                }
            }
            directions.insert(name.to_string(), dir);
        }

        // Leaf mean = sum of ancestor directions, scaled so that sibling
        // leaves (which differ in exactly two ancestors) end up about
        // class_separation apart.
        let scale = cfg.class_separation / std::f64::consts::SQRT_2;
        let means = class_names
            .iter()
            .map(|name| {
                let leaf = graph.node_id(name).expect("class names are leaf names");
                let mut mu = vec![0.0; p];
                for a in graph.ancestors(leaf).iter() {
                    let dir = &directions[graph.name(a)];
                    for (m, d) in mu.iter_mut().zip(dir) {
                        *m += scale * d;
                    }
                }
                mu
            })
            .collect();

        Ok(Self {
            graph,
            class_names,
            feature_names: (0..p).map(|j| format!("f{j:03}")).collect(),
            means,
            props: cfg.class_props.clone(),
            seed: cfg.seed,
        })
    }

    #[inline]
    pub fn graph(&self) -> &LabelGraph {
        &self.graph
    }

    #[inline]
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    #[inline]
    pub fn class_props(&self) -> &[f64] {
        &self.props
    }

    #[inline]
    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Class-conditional mean vector of class column `c`.
    #[inline]
    pub fn class_mean(&self, c: usize) -> &[f64] {
        &self.means[c]
    }

    /// Draws `n` labeled rows on a caller-provided RNG (see [`generate`]
    /// for the seed-driven convenience).
    pub fn sample(
        &self,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(FeatureMatrix, Vec<String>), SynthError> {
        if n == 0 {
            return Err(SynthError::InvalidConfig("sample size must be at least 1".into()));
        }
        let p = self.feature_names.len();
        let dist = WeightedIndex::new(&self.props)
            .map_err(|e| SynthError::InvalidProps(e.to_string()))?;
        let mut data = Vec::with_capacity(n * p);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = dist.sample(rng);
            let mu = &self.means[c];
            for j in 0..p {
                let noise: f64 = rng.sample(StandardNormal);
                data.push(mu[j] + noise);
            }
            labels.push(self.class_names[c].clone());
        }
        let matrix = FeatureMatrix::new(self.feature_names.clone(), data)?
            .with_ids((0..n).map(|i| format!("r{i}")).collect())?;
        Ok((matrix, labels))
    }

    /// Exact Bayes posterior P(Y | X) under this generator's own marginal
    /// — the "perfectly calibrated model" for its population. Under label
    /// shift, evaluating a *source* generator's posterior on samples from
    /// the shifted generator reproduces a model fit before the shift.
    pub fn posterior_probs(&self, x: &FeatureMatrix) -> Result<ProbMatrix, SynthError> {
        if x.feature_names() != self.feature_names.as_slice() {
            return Err(SynthError::FeatureMismatch);
        }
        let k = self.class_names.len();
        let mut data = Vec::with_capacity(x.n_rows() * k);
        let mut logit = vec![0.0; k];
        for i in 0..x.n_rows() {
            let row = x.row(i);
            for (c, l) in logit.iter_mut().enumerate() {
                let sq: f64 =
                    row.iter().zip(&self.means[c]).map(|(v, m)| (v - m) * (v - m)).sum();
                *l = self.props[c].ln() - 0.5 * sq;
            }
            let zmax = logit.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let total: f64 = logit.iter().map(|&v| (v - zmax).exp()).sum();
            data.extend(logit.iter().map(|&v| (v - zmax).exp() / total));
        }
        let probs = ProbMatrix::new(self.class_names.clone(), data)?;
        match x.ids() {
            Some(ids) => Ok(probs.with_ids(ids.to_vec())?),
            None => Ok(probs),
        }
    }

    /// RNG seeded for this generator on a chosen stream.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// One-shot sampling with the config's own seed.
pub fn generate(cfg: &SynthConfig, n: usize) -> Result<(FeatureMatrix, Vec<String>), SynthError> {
    let generator = Generator::new(cfg)?;
    let mut rng = generator.rng(GENERATE_STREAM);
    generator.sample(n, &mut rng)
}

/// Exact label shift: same graph, same seed (hence identical class means),
/// new class marginal.
pub fn shift_props(cfg: &SynthConfig, target_props: &[f64]) -> Result<SynthConfig, SynthError> {
    let graph = cfg.graph_spec.build()?;
    validate_props(target_props, graph.leaf_count())?;
    Ok(SynthConfig { class_props: target_props.to_vec(), ..cfg.clone() })
}
