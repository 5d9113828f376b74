//! Hierarchical label tree.
//!
//! A [`LabelTree`] is built once from a list of `(parent, child)` edges and is
//! immutable afterwards. Nodes get dense [`NodeId`]s in canonical order: the
//! root is `0`, then a breadth-first walk that visits the children of every
//! node in lexicographic name order. Every query (ancestors, descendants,
//! LCA, tree distance, root-to-leaf paths) iterates in that order, which makes
//! tie-breaking and serialization deterministic.
//!
//! The root is the broadest class and is positive for every sample, so it is
//! left out of ancestor sets and out of the score vectors used by the losses.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense node index in canonical order. The root is always `NodeId(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0
    }

    /// Position of this node in a score vector (which omits the root).
    pub fn score_index(self) -> Option<usize> {
        self.0.checked_sub(1)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("edge list is empty")]
    EmptyTree,
    #[error("tree has more than one root: {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("edges contain a cycle through `{0}`")]
    Cycle(String),
    #[error("node `{0}` appears as a child more than once")]
    DuplicateChild(String),
    #[error("node id {0} is out of range")]
    InvalidNode(usize),
    #[error("node `{0}` is not a leaf")]
    NotALeaf(String),
    #[error("unknown node name `{0}`")]
    UnknownName(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Per-level weighting of the hierarchical loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightScheme {
    /// Every level weighs 1.
    None,
    /// Normalized height weight: `h_i / H`.
    Nhw,
    /// Proportional height weight: `h_i / Σ h_i`.
    Phw,
}

/// Weights indexed by depth. Depth 0 (the root) carries no loss term and
/// has weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelWeights {
    by_depth: Vec<f64>,
}

impl LevelWeights {
    pub fn weight(&self, depth: usize) -> f64 {
        self.by_depth.get(depth).copied().unwrap_or(0.0)
    }

    /// `(depth, weight)` for depths `1..=H`.
    pub fn levels(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.by_depth.iter().copied().enumerate().skip(1)
    }
}

/// Multi-hot label over all nodes. The true set is exactly the root-to-leaf
/// path of one leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierLabel {
    bits: Vec<bool>,
    leaf: NodeId,
}

impl HierLabel {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn leaf(&self) -> NodeId {
        self.leaf
    }

    pub fn is_positive(&self, v: NodeId) -> bool {
        self.bits.get(v.0).copied().unwrap_or(false)
    }

    /// Number of nodes including the root.
    pub fn num_nodes(&self) -> usize {
        self.bits.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelTree {
    names: Vec<String>,
    index: HashMap<String, NodeId>,
    parent: Vec<NodeId>,
    children: Vec<Vec<NodeId>>,
    depth: Vec<usize>,
    height: usize,
    leaves: Vec<NodeId>,
    leaf_position: Vec<Option<usize>>,
    // ancestor chain of each node, shallow to deep, root excluded, self included
    ancestors: Vec<Vec<NodeId>>,
    // subtree of each node in canonical order, self included
    descendants: Vec<Vec<NodeId>>,
}

impl LabelTree {
    /// Builds and validates a tree from `(parent, child)` name pairs.
    pub fn build<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Self, TreeError> {
        if edges.is_empty() {
            return Err(TreeError::EmptyTree);
        }

        let mut order: Vec<&str> = Vec::new();
        let mut seen: HashMap<&str, ()> = HashMap::new();
        let mut parent_of: HashMap<&str, &str> = HashMap::new();
        let mut kids: HashMap<&str, Vec<&str>> = HashMap::new();

        for (p, c) in edges {
            let (p, c) = (p.as_ref(), c.as_ref());
            for name in [p, c] {
                if seen.insert(name, ()).is_none() {
                    order.push(name);
                }
            }
            if p == c {
                return Err(TreeError::Cycle(p.to_string()));
            }
            if parent_of.insert(c, p).is_some() {
                return Err(TreeError::DuplicateChild(c.to_string()));
            }
            kids.entry(p).or_default().push(c);
        }

        let roots: Vec<&str> = order
            .iter()
            .copied()
            .filter(|n| !parent_of.contains_key(n))
            .collect();
        let root = match roots.as_slice() {
            [] => return Err(TreeError::Cycle(order[0].to_string())),
            [r] => *r,
            _ => {
                return Err(TreeError::MultipleRoots(
                    roots.iter().map(|s| s.to_string()).collect(),
                ))
            }
        };

        for list in kids.values_mut() {
            list.sort_unstable();
        }

        // canonical breadth-first numbering
        let mut names: Vec<String> = Vec::with_capacity(order.len());
        let mut parent: Vec<NodeId> = Vec::with_capacity(order.len());
        let mut depth: Vec<usize> = Vec::with_capacity(order.len());
        let mut index: HashMap<String, NodeId> = HashMap::new();
        let mut queue: VecDeque<(&str, NodeId, usize)> = VecDeque::new();
        queue.push_back((root, NodeId::ROOT, 0));
        while let Some((name, par, d)) = queue.pop_front() {
            let id = NodeId(names.len());
            names.push(name.to_string());
            parent.push(par);
            depth.push(d);
            index.insert(name.to_string(), id);
            if let Some(list) = kids.get(name) {
                for c in list {
                    queue.push_back((c, id, d + 1));
                }
            }
        }

        if names.len() != order.len() {
            // everything unreachable from the root sits on a parent cycle
            let stray = order
                .iter()
                .find(|n| !index.contains_key(**n))
                .expect("some node is unreachable");
            return Err(TreeError::Cycle(stray.to_string()));
        }

        Ok(Self::from_parts(names, index, parent, depth))
    }

    fn from_parts(
        names: Vec<String>,
        index: HashMap<String, NodeId>,
        parent: Vec<NodeId>,
        depth: Vec<usize>,
    ) -> Self {
        let n = names.len();
        let mut children = vec![Vec::new(); n];
        for v in 1..n {
            children[parent[v].0].push(NodeId(v));
        }
        let height = depth.iter().copied().max().unwrap_or(0);
        let leaves: Vec<NodeId> = (0..n)
            .filter(|&v| children[v].is_empty())
            .map(NodeId)
            .collect();
        let mut leaf_position = vec![None; n];
        for (pos, leaf) in leaves.iter().enumerate() {
            leaf_position[leaf.0] = Some(pos);
        }

        let mut ancestors: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for v in 1..n {
            let mut chain = ancestors[parent[v].0].clone();
            chain.push(NodeId(v));
            ancestors[v] = chain;
        }

        // parents precede children, so a reverse sweep collects subtrees
        let mut descendants: Vec<Vec<NodeId>> = (0..n).map(|v| vec![NodeId(v)]).collect();
        for v in (1..n).rev() {
            let sub = std::mem::take(&mut descendants[v]);
            descendants[parent[v].0].extend_from_slice(&sub);
            descendants[v] = sub;
        }
        for d in &mut descendants {
            d.sort_unstable();
        }

        LabelTree {
            names,
            index,
            parent,
            children,
            depth,
            height,
            leaves,
            leaf_position,
            ancestors,
            descendants,
        }
    }

    /// Parses the tab-separated edge format: one `parent<TAB>child` per line.
    /// Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, TreeError> {
        let mut edges: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                [p, c] if !p.is_empty() && !c.is_empty() => {
                    edges.push((p.to_string(), c.to_string()))
                }
                _ => {
                    return Err(TreeError::Parse {
                        line: i + 1,
                        reason: format!("expected `parent<TAB>child`, got {line:?}"),
                    })
                }
            }
        }
        Self::build(&edges)
    }

    /// Edge dump in canonical order. `parse(dump).to_edge_text() == dump`.
    pub fn to_edge_text(&self) -> String {
        let mut out = String::new();
        for v in 1..self.len() {
            out.push_str(&self.names[self.parent[v].0]);
            out.push('\t');
            out.push_str(&self.names[v]);
            out.push('\n');
        }
        out
    }

    /// Total node count including the root.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Length of a score vector: every node except the root.
    pub fn num_scored(&self) -> usize {
        self.len() - 1
    }

    pub fn root(&self) -> NodeId {
        NodeId::ROOT
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    /// Non-root nodes in canonical order.
    pub fn scored_nodes(&self) -> impl Iterator<Item = NodeId> {
        (1..self.len()).map(NodeId)
    }

    fn check(&self, v: NodeId) -> Result<(), TreeError> {
        if v.0 < self.len() {
            Ok(())
        } else {
            Err(TreeError::InvalidNode(v.0))
        }
    }

    pub fn name(&self, v: NodeId) -> Result<&str, TreeError> {
        self.check(v)?;
        Ok(&self.names[v.0])
    }

    pub fn id(&self, name: &str) -> Result<NodeId, TreeError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TreeError::UnknownName(name.to_string()))
    }

    pub fn parent(&self, v: NodeId) -> Result<NodeId, TreeError> {
        self.check(v)?;
        Ok(self.parent[v.0])
    }

    pub fn children(&self, v: NodeId) -> Result<&[NodeId], TreeError> {
        self.check(v)?;
        Ok(&self.children[v.0])
    }

    pub fn depth(&self, v: NodeId) -> Result<usize, TreeError> {
        self.check(v)?;
        Ok(self.depth[v.0])
    }

    pub fn is_leaf(&self, v: NodeId) -> bool {
        self.leaf_position.get(v.0).is_some_and(Option::is_some)
    }

    /// Position of `v` in [`LabelTree::leaves`].
    pub fn leaf_position(&self, v: NodeId) -> Option<usize> {
        self.leaf_position.get(v.0).copied().flatten()
    }

    fn require_leaf(&self, v: NodeId) -> Result<(), TreeError> {
        self.check(v)?;
        if self.is_leaf(v) {
            Ok(())
        } else {
            Err(TreeError::NotALeaf(self.names[v.0].clone()))
        }
    }

    /// Superclasses of `v` including `v` itself, shallow to deep. The root is
    /// excluded, so `ancestors(root)` is empty.
    pub fn ancestors(&self, v: NodeId) -> Result<&[NodeId], TreeError> {
        self.check(v)?;
        Ok(&self.ancestors[v.0])
    }

    /// Subclasses of `v` including `v` itself, in canonical order.
    pub fn descendants(&self, v: NodeId) -> Result<&[NodeId], TreeError> {
        self.check(v)?;
        Ok(&self.descendants[v.0])
    }

    /// Lowest common ancestor; a node counts as its own ancestor.
    pub fn lca(&self, u: NodeId, v: NodeId) -> Result<NodeId, TreeError> {
        self.check(u)?;
        self.check(v)?;
        let (mut a, mut b) = (u, v);
        while self.depth[a.0] > self.depth[b.0] {
            a = self.parent[a.0];
        }
        while self.depth[b.0] > self.depth[a.0] {
            b = self.parent[b.0];
        }
        while a != b {
            a = self.parent[a.0];
            b = self.parent[b.0];
        }
        Ok(a)
    }

    /// Tree distance ψ(u, v): hops from `u` and from `v` up to their LCA.
    pub fn tree_distance(&self, u: NodeId, v: NodeId) -> Result<usize, TreeError> {
        let l = self.lca(u, v)?;
        Ok(self.depth[u.0] + self.depth[v.0] - 2 * self.depth[l.0])
    }

    /// Expands a leaf into its multi-hot hierarchical label.
    pub fn expand_leaf_label(&self, leaf: NodeId) -> Result<HierLabel, TreeError> {
        self.require_leaf(leaf)?;
        let mut bits = vec![false; self.len()];
        bits[0] = true;
        for a in &self.ancestors[leaf.0] {
            bits[a.0] = true;
        }
        Ok(HierLabel { bits, leaf })
    }

    /// Root-to-`v` node sequence.
    pub fn path_to(&self, v: NodeId) -> Result<Vec<NodeId>, TreeError> {
        self.check(v)?;
        let mut path = Vec::with_capacity(self.depth[v.0] + 1);
        path.push(NodeId::ROOT);
        path.extend_from_slice(&self.ancestors[v.0]);
        Ok(path)
    }

    /// One root-to-leaf path per leaf, in canonical leaf order.
    pub fn enumerate_paths(&self) -> Vec<Vec<NodeId>> {
        self.leaves
            .iter()
            .map(|&l| self.path_to(l).expect("leaf ids are valid"))
            .collect()
    }

    /// Level weights with `h_i = i` for depth levels `1..=H`.
    pub fn level_weights(&self, scheme: WeightScheme) -> LevelWeights {
        let h = self.height;
        let total: usize = (1..=h).sum();
        let mut by_depth = vec![0.0; h + 1];
        for (i, w) in by_depth.iter_mut().enumerate().skip(1) {
            *w = match scheme {
                WeightScheme::None => 1.0,
                WeightScheme::Nhw => i as f64 / h as f64,
                WeightScheme::Phw => i as f64 / total as f64,
            };
        }
        LevelWeights { by_depth }
    }

    /// Parent of a leaf, i.e. the supergroup the leaf's concept group belongs to.
    pub fn supergroup(&self, leaf: NodeId) -> Result<NodeId, TreeError> {
        self.require_leaf(leaf)?;
        Ok(self.parent[leaf.0])
    }

    /// True when every leaf sits at depth `H`.
    pub fn is_uniform_depth(&self) -> bool {
        self.leaves.iter().all(|l| self.depth[l.0] == self.height)
    }
}

/// Draws a random tree with exactly `height` levels and at most `max_nodes`
/// nodes (at least `height + 1`). Node names are zero-padded so that name
/// order matches creation order.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, max_nodes: usize, height: usize) -> LabelTree {
    assert!(height >= 1, "height must be at least 1");
    assert!(max_nodes > height, "need at least height + 1 nodes");
    let target = rng.random_range(height + 1..=max_nodes);
    let mut depth = vec![0usize];
    let mut edges: Vec<(String, String)> = Vec::with_capacity(target);
    let name = |i: usize| format!("n{i:04}");
    for d in 1..=height {
        edges.push((name(d - 1), name(d)));
        depth.push(d);
    }
    while depth.len() < target {
        let open: Vec<usize> = (0..depth.len()).filter(|&v| depth[v] < height).collect();
        let p = open[rng.random_range(0..open.len())];
        let id = depth.len();
        edges.push((name(p), name(id)));
        depth.push(depth[p] + 1);
    }
    LabelTree::build(&edges).expect("generated edges form a tree")
}

/// The five-class cavitation hierarchy (H = 2).
pub fn cavitation_tree() -> LabelTree {
    LabelTree::build(&[
        ("root", "cavitation"),
        ("root", "non-cavitation"),
        ("cavitation", "incipient"),
        ("cavitation", "constant"),
        ("cavitation", "choked flow"),
        ("non-cavitation", "turbulent"),
        ("non-cavitation", "no flow"),
    ])
    .expect("static tree is valid")
}
