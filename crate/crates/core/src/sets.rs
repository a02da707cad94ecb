//! Set-valued predictions over the class columns of a probability matrix.

use crate::graph::{GraphError, NodeId, NodeSet};
use crate::scores::ClassMap;

/// A prediction set: a sorted collection of class columns, optionally
/// annotated with hierarchy context when produced by graph-aware
/// calibration.
///
/// `anchor` is the hierarchy node whose leaf set seeded a graph-built set;
/// threshold-built sets have none. `summary` is the minimal collection of
/// hierarchy nodes naming the set exactly — usually one node, but a set
/// assembled around a multi-parent leaf may need several. It is filled on
/// demand by [`summarize`](Self::summarize) since batch simulations never
/// need it.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    classes: Vec<u32>,
    anchor: Option<NodeId>,
    summary: Option<Vec<NodeId>>,
}

impl PredictionSet {
    /// Builds a set from class columns; sorts and deduplicates.
    pub fn from_classes(mut classes: Vec<u32>) -> Self {
        classes.sort_unstable();
        classes.dedup();
        PredictionSet { classes, anchor: None, summary: None }
    }

    pub(crate) fn with_anchor(mut self, anchor: NodeId) -> Self {
        self.anchor = Some(anchor);
        self
    }

    /// Sorted class columns in the set.
    #[inline]
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.classes.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    #[inline]
    pub fn contains(&self, col: u32) -> bool {
        self.classes.binary_search(&col).is_ok()
    }

    /// Node whose leaf set seeded this set, for graph-built sets.
    #[inline]
    pub fn anchor(&self) -> Option<NodeId> {
        self.anchor
    }

    /// Cached summary nodes, if [`summarize`](Self::summarize) has run.
    #[inline]
    pub fn summary(&self) -> Option<&[NodeId]> {
        self.summary.as_deref()
    }

    /// Class names of the members, resolved against the matrix columns.
    pub fn member_names<'a>(&self, class_names: &'a [String]) -> Vec<&'a str> {
        self.classes.iter().map(|&c| class_names[c as usize].as_str()).collect()
    }

    /// Names this set with the fewest hierarchy nodes whose leaves union to
    /// exactly its members, caching the result. Empty sets have no summary.
    pub fn summarize(&mut self, map: &ClassMap) -> Result<&[NodeId], GraphError> {
        if self.summary.is_none() {
            let ids = NodeSet::from_ids(self.classes.iter().map(|&c| map.class_node(c)).collect());
            self.summary = Some(map.graph().summarize_set(&ids)?);
        }
        Ok(self.summary.as_deref().unwrap())
    }
}
