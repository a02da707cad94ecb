//! Label hierarchy support: a validated DAG over class labels.
//!
//! Nodes are opaque string identifiers. Edges point from the more general
//! term to the more specific one (`parent -> child`). Leaves are the
//! observable class labels; internal nodes group them. The graph is
//! validated at construction (acyclic, non-empty, no blank identifiers) and
//! all derived structure — leaf sets per node, the root, pairwise leaf
//! distances — is precomputed or cached so downstream calibration loops
//! never re-walk edges.
//!
//! Conventions used throughout:
//! * ancestor sets are reflexive (`v` is an ancestor of itself);
//! * an input with several roots gets a synthetic root joined above them,
//!   so every graph has exactly one root and is connected;
//! * distances are undirected unit-weight shortest paths.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::OnceLock;

use thiserror::Error;

/// Index of a node inside its owning [`LabelGraph`].
///
/// Ids are dense (0..node_count) and only meaningful for the graph that
/// produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Errors from graph construction and queries.
#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge list is empty")]
    EmptyInput,
    #[error("blank node identifier in edge ({0:?}, {1:?})")]
    EmptyIdentifier(String, String),
    #[error("label graph contains a cycle through {0:?}")]
    CycleDetected(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("node {0:?} is not a leaf")]
    NotALeaf(String),
    #[error("node set is empty")]
    EmptySet,
}

/// A sorted, deduplicated set of node ids from one graph.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NodeSet {
    ids: Vec<NodeId>,
}

impl NodeSet {
    /// Builds a set from arbitrary ids, sorting and deduplicating.
    pub fn from_ids(mut ids: Vec<NodeId>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        NodeSet { ids }
    }

    #[inline]
    pub fn contains(&self, id: NodeId) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    #[inline]
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ids.iter().copied()
    }
}

/// Validated label DAG with precomputed leaf structure.
#[derive(Debug)]
pub struct LabelGraph {
    names: Vec<String>,
    index: HashMap<String, NodeId>,
    children: Vec<Vec<NodeId>>,
    parents: Vec<Vec<NodeId>>,
    root: NodeId,
    synthetic_root: bool,
    /// All leaves, ordered by node id.
    leaves: Vec<NodeId>,
    /// node id -> position in `leaves`, for leaves only.
    leaf_ordinal: Vec<Option<u32>>,
    /// node id -> sorted leaf ordinals of the leaves reachable from it
    /// (reflexive: a leaf's own list is just itself).
    leaf_desc: Vec<Vec<u32>>,
    /// Lazily built K x K undirected leaf-to-leaf distance matrix.
    leaf_dist: OnceLock<Vec<u16>>,
}

impl LabelGraph {
    /// Builds a graph from `(parent, child)` edges.
    ///
    /// Duplicate edges are tolerated and deduplicated silently. Blank
    /// identifiers, cycles (including self-loops) and an empty edge list are
    /// rejected. When the input has several roots, a synthetic root is
    /// inserted above them so the hierarchy always has a single top.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Self, GraphError> {
        if edges.is_empty() {
            return Err(GraphError::EmptyInput);
        }

        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, NodeId> = HashMap::new();
        let intern = |name: &str, names: &mut Vec<String>, index: &mut HashMap<String, NodeId>| {
            if let Some(&id) = index.get(name) {
                return id;
            }
            let id = NodeId(names.len() as u32);
            names.push(name.to_string());
            index.insert(name.to_string(), id);
            id
        };

        let mut children: Vec<Vec<NodeId>> = Vec::new();
        let mut parents: Vec<Vec<NodeId>> = Vec::new();
        let mut seen: HashSet<(NodeId, NodeId)> = HashSet::new();
        for (parent, child) in edges {
            let (parent, child) = (parent.as_ref(), child.as_ref());
            if parent.trim().is_empty() || child.trim().is_empty() {
                return Err(GraphError::EmptyIdentifier(parent.to_string(), child.to_string()));
            }
            if parent == child {
                return Err(GraphError::CycleDetected(parent.to_string()));
            }
            let p = intern(parent, &mut names, &mut index);
            let c = intern(child, &mut names, &mut index);
            children.resize(names.len(), Vec::new());
            parents.resize(names.len(), Vec::new());
            if seen.insert((p, c)) {
                children[p.index()].push(c);
                parents[c.index()].push(p);
            }
        }

        // Join multiple roots under one synthetic top so the hierarchy is
        // connected and "the whole label space" is a node like any other.
        let roots: Vec<NodeId> = (0..names.len())
            .map(|i| NodeId(i as u32))
            .filter(|id| parents[id.index()].is_empty())
            .collect();
        let (root, synthetic_root) = if roots.len() == 1 {
            (roots[0], false)
        } else {
            let mut name = String::from("__root__");
            while index.contains_key(&name) {
                name.push('_');
            }
            let id = NodeId(names.len() as u32);
            names.push(name.clone());
            index.insert(name, id);
            children.push(roots.clone());
            parents.push(Vec::new());
            for r in roots {
                parents[r.index()].push(id);
            }
            (id, true)
        };

        // Kahn's algorithm: detects cycles and yields a topological order
        // that the leaf-set pass below consumes in reverse.
        let n = names.len();
        let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<NodeId> =
            (0..n).map(|i| NodeId(i as u32)).filter(|id| indegree[id.index()] == 0).collect();
        let mut topo: Vec<NodeId> = Vec::with_capacity(n);
        while let Some(v) = queue.pop_front() {
            topo.push(v);
            for &c in &children[v.index()] {
                indegree[c.index()] -= 1;
                if indegree[c.index()] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if topo.len() != n {
            let stuck = (0..n)
                .find(|&i| indegree[i] > 0)
                .map(|i| names[i].clone())
                .unwrap_or_default();
            return Err(GraphError::CycleDetected(stuck));
        }

        let leaves: Vec<NodeId> = (0..n)
            .map(|i| NodeId(i as u32))
            .filter(|id| children[id.index()].is_empty())
            .collect();
        let mut leaf_ordinal = vec![None; n];
        for (ord, &leaf) in leaves.iter().enumerate() {
            leaf_ordinal[leaf.index()] = Some(ord as u32);
        }

        // Reflexive leaf sets, built leaves-up.
        let mut leaf_desc: Vec<Vec<u32>> = vec![Vec::new(); n];
        for &v in topo.iter().rev() {
            if let Some(ord) = leaf_ordinal[v.index()] {
                leaf_desc[v.index()] = vec![ord];
            } else {
                let mut merged: Vec<u32> = Vec::new();
                for &c in &children[v.index()] {
                    merged.extend_from_slice(&leaf_desc[c.index()]);
                }
                merged.sort_unstable();
                merged.dedup();
                leaf_desc[v.index()] = merged;
            }
        }

        Ok(LabelGraph {
            names,
            index,
            children,
            parents,
            root,
            synthetic_root,
            leaves,
            leaf_ordinal,
            leaf_desc,
            leaf_dist: OnceLock::new(),
        })
    }

    #[inline]
    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    #[inline]
    pub fn root(&self) -> NodeId {
        self.root
    }

    /// True when the root was synthesized to join a multi-root input.
    #[inline]
    pub fn has_synthetic_root(&self) -> bool {
        self.synthetic_root
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId, GraphError> {
        self.index.get(name).copied().ok_or_else(|| GraphError::UnknownNode(name.to_string()))
    }

    #[inline]
    pub fn name(&self, id: NodeId) -> &str {
        &self.names[id.index()]
    }

    #[inline]
    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.leaf_ordinal[id.index()].is_some()
    }

    /// All leaves, ordered by node id. This order defines the leaf ordinals
    /// used by [`leaf_set`](Self::leaf_set) and the distance matrix.
    #[inline]
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    /// Position of a leaf in [`leaves`](Self::leaves), if `id` is a leaf.
    #[inline]
    pub fn leaf_ordinal(&self, id: NodeId) -> Option<u32> {
        self.leaf_ordinal[id.index()]
    }

    #[inline]
    pub fn leaf_by_ordinal(&self, ordinal: u32) -> NodeId {
        self.leaves[ordinal as usize]
    }

    #[inline]
    pub fn parents_of(&self, id: NodeId) -> &[NodeId] {
        &self.parents[id.index()]
    }

    #[inline]
    pub fn children_of(&self, id: NodeId) -> &[NodeId] {
        &self.children[id.index()]
    }

    /// Sorted leaf ordinals of the leaves reachable from `v` (reflexive).
    #[inline]
    pub fn leaf_set(&self, v: NodeId) -> &[u32] {
        &self.leaf_desc[v.index()]
    }

    /// Reflexive ancestor set of `v`: `v` itself plus everything reachable
    /// by walking parent edges. Always contains the root.
    pub fn ancestors(&self, v: NodeId) -> NodeSet {
        self.reachable(v, |id| &self.parents[id.index()])
    }

    /// Reflexive descendant set of `v`.
    pub fn descendants(&self, v: NodeId) -> NodeSet {
        self.reachable(v, |id| &self.children[id.index()])
    }

    /// Leaves reachable from `v`, as node ids. A leaf's own set is itself.
    pub fn leaf_descendants(&self, v: NodeId) -> NodeSet {
        NodeSet::from_ids(self.leaf_desc[v.index()].iter().map(|&o| self.leaves[o as usize]).collect())
    }

    fn reachable<'a>(&'a self, v: NodeId, next: impl Fn(NodeId) -> &'a [NodeId]) -> NodeSet {
        let mut seen = vec![false; self.node_count()];
        let mut queue = VecDeque::from([v]);
        seen[v.index()] = true;
        let mut out = Vec::new();
        while let Some(u) = queue.pop_front() {
            out.push(u);
            for &w in next(u) {
                if !seen[w.index()] {
                    seen[w.index()] = true;
                    queue.push_back(w);
                }
            }
        }
        NodeSet::from_ids(out)
    }

    /// Undirected unit-weight shortest-path distance between two nodes.
    ///
    /// The graph is connected (single root), so a distance always exists.
    pub fn undirected_distance(&self, u: NodeId, v: NodeId) -> u32 {
        if u == v {
            return 0;
        }
        let mut dist = vec![u32::MAX; self.node_count()];
        dist[u.index()] = 0;
        let mut queue = VecDeque::from([u]);
        while let Some(w) = queue.pop_front() {
            let d = dist[w.index()];
            for &x in self.children[w.index()].iter().chain(&self.parents[w.index()]) {
                if dist[x.index()] == u32::MAX {
                    dist[x.index()] = d + 1;
                    if x == v {
                        return d + 1;
                    }
                    queue.push_back(x);
                }
            }
        }
        unreachable!("label graph is connected by construction");
    }

    /// Distance between two leaves given by ordinal, via the cached matrix.
    #[inline]
    pub fn leaf_distance(&self, a: u32, b: u32) -> u32 {
        let k = self.leaf_count();
        self.leaf_dist_matrix()[a as usize * k + b as usize] as u32
    }

    fn leaf_dist_matrix(&self) -> &[u16] {
        self.leaf_dist.get_or_init(|| {
            let k = self.leaf_count();
            let mut matrix = vec![0u16; k * k];
            for (ord, &leaf) in self.leaves.iter().enumerate() {
                let mut dist = vec![u32::MAX; self.node_count()];
                dist[leaf.index()] = 0;
                let mut queue = VecDeque::from([leaf]);
                while let Some(w) = queue.pop_front() {
                    let d = dist[w.index()];
                    for &x in self.children[w.index()].iter().chain(&self.parents[w.index()]) {
                        if dist[x.index()] == u32::MAX {
                            dist[x.index()] = d + 1;
                            queue.push_back(x);
                        }
                    }
                }
                for (other, &ol) in self.leaves.iter().enumerate() {
                    matrix[ord * k + other] = dist[ol.index()] as u16;
                }
            }
            matrix
        })
    }

    /// Mean pairwise undirected distance between the leaves in `ordinals`.
    ///
    /// Sets of size zero or one have no pairs and report 0.
    pub fn homogeneity(&self, ordinals: &[u32]) -> f64 {
        let m = ordinals.len();
        if m < 2 {
            return 0.0;
        }
        let k = self.leaf_count();
        let matrix = self.leaf_dist_matrix();
        let mut total = 0u64;
        for (i, &a) in ordinals.iter().enumerate() {
            for &b in &ordinals[i + 1..] {
                total += matrix[a as usize * k + b as usize] as u64;
            }
        }
        total as f64 / (m * (m - 1) / 2) as f64
    }

    /// Names the leaf set `set` with as few nodes as possible.
    ///
    /// Returns nodes whose leaf sets union exactly to `set`. When a single
    /// node's leaves equal the set, that node alone is returned (the most
    /// specific one if a chain of nodes shares the same leaves). Otherwise a
    /// minimal covering collection is chosen greedily from the maximal nodes
    /// that fit inside the set — e.g. a set formed around a multi-parent
    /// leaf may only be expressible as the union of two ancestors, in which
    /// case both are returned. Output is sorted by name.
    pub fn summarize_set(&self, set: &NodeSet) -> Result<Vec<NodeId>, GraphError> {
        if set.is_empty() {
            return Err(GraphError::EmptySet);
        }
        let mut target: Vec<u32> = Vec::with_capacity(set.len());
        for id in set.iter() {
            match self.leaf_ordinal[id.index()] {
                Some(ord) => target.push(ord),
                None => return Err(GraphError::NotALeaf(self.name(id).to_string())),
            }
        }
        target.sort_unstable();

        // Exact single-node representation wins; among nodes with identical
        // leaf sets prefer the most specific (fewest descendants), breaking
        // remaining ties by name.
        let exact = (0..self.node_count())
            .map(|i| NodeId(i as u32))
            .filter(|&v| self.leaf_desc[v.index()] == target)
            .min_by(|&a, &b| {
                let da = self.descendants(a).len();
                let db = self.descendants(b).len();
                da.cmp(&db).then_with(|| self.name(a).cmp(self.name(b)))
            });
        if let Some(v) = exact {
            return Ok(vec![v]);
        }

        // Candidates are nodes entirely inside the set; keep the maximal
        // ones (every leaf is itself a candidate, so coverage is always
        // possible), then cover greedily by most new leaves.
        let all_inside: Vec<NodeId> = (0..self.node_count())
            .map(|i| NodeId(i as u32))
            .filter(|&v| is_sorted_subset(&self.leaf_desc[v.index()], &target))
            .collect();
        let candidates: Vec<NodeId> = all_inside
            .iter()
            .copied()
            .filter(|&v| {
                !all_inside.iter().any(|&u| {
                    u != v
                        && self.leaf_desc[u.index()].len() > self.leaf_desc[v.index()].len()
                        && is_sorted_subset(&self.leaf_desc[v.index()], &self.leaf_desc[u.index()])
                })
            })
            .collect();

        let mut uncovered: HashSet<u32> = target.iter().copied().collect();
        let mut picked: Vec<NodeId> = Vec::new();
        while !uncovered.is_empty() {
            let best = candidates
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    let ga = self.leaf_desc[a.index()].iter().filter(|o| uncovered.contains(o)).count();
                    let gb = self.leaf_desc[b.index()].iter().filter(|o| uncovered.contains(o)).count();
                    // max_by keeps the later element on ties, so order the
                    // name comparison to make the lexicographically smaller
                    // name win.
                    ga.cmp(&gb).then_with(|| self.name(b).cmp(self.name(a)))
                })
                .expect("leaves of the set are always candidates");
            for o in &self.leaf_desc[best.index()] {
                uncovered.remove(o);
            }
            picked.push(best);
        }

        // Drop nodes made redundant by later greedy picks.
        let mut keep: Vec<NodeId> = Vec::with_capacity(picked.len());
        for (i, &v) in picked.iter().enumerate() {
            let mut covered: HashSet<u32> = HashSet::new();
            for (j, &u) in picked.iter().enumerate() {
                if i != j && (keep.contains(&u) || j > i) {
                    covered.extend(self.leaf_desc[u.index()].iter().copied());
                }
            }
            if !self.leaf_desc[v.index()].iter().all(|o| covered.contains(o)) {
                keep.push(v);
            }
        }
        keep.sort_by(|&a, &b| self.name(a).cmp(self.name(b)));
        Ok(keep)
    }

    /// Convenience: node names for a set of ids.
    pub fn names_of(&self, ids: &[NodeId]) -> Vec<&str> {
        ids.iter().map(|&id| self.name(id)).collect()
    }
}

/// True when sorted slice `a` is a subset of sorted slice `b`.
fn is_sorted_subset(a: &[u32], b: &[u32]) -> bool {
    let mut it = b.iter();
    'outer: for x in a {
        for y in it.by_ref() {
            match y.cmp(x) {
                std::cmp::Ordering::Less => continue,
                std::cmp::Ordering::Equal => continue 'outer,
                std::cmp::Ordering::Greater => return false,
            }
        }
        return false;
    }
    true
}
