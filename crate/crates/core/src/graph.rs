//! Path-star graphs, tree-star variants, edge-list shuffles and sample-space
//! accounting.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

/// Node label. Labels live in `1..=num_nodes`.
pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("at least two arms are required (got D={0})")]
    TooFewArms(usize),
    #[error("arms need at least two nodes (got M={0})")]
    ArmTooShort(usize),
    #[error("node universe of {have} labels cannot hold a graph of {need} nodes")]
    UniverseTooSmall { have: usize, need: usize },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("{mode:?} shuffling is only defined for path-star graphs")]
    ShuffleNotSupported { mode: ShuffleMode },
}

/// Number of nodes in a graph with `d` arms of `m` nodes (start node shared).
pub fn graph_node_count(d: usize, m: usize) -> usize {
    d * (m - 1) + 1
}

fn check_shape(d: usize, m: usize, num_nodes: usize) -> Result<(), GraphError> {
    if d < 2 {
        return Err(GraphError::TooFewArms(d));
    }
    if m < 2 {
        return Err(GraphError::ArmTooShort(m));
    }
    let need = graph_node_count(d, m);
    if num_nodes < need {
        return Err(GraphError::UniverseTooSmall { have: num_nodes, need });
    }
    Ok(())
}

/// A star of `D` equal-length arms sharing the start node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStarGraph {
    pub start: NodeId,
    /// Each arm lists its `M` nodes, beginning with `start`.
    pub arms: Vec<Vec<NodeId>>,
    pub target_arm: usize,
    /// Size of the label universe the nodes were drawn from.
    pub num_nodes: usize,
}

impl PathStarGraph {
    /// Builds a graph from explicit arms, checking every structural invariant.
    pub fn from_arms(
        arms: Vec<Vec<NodeId>>,
        target_arm: usize,
        num_nodes: usize,
    ) -> Result<Self, GraphError> {
        let start = arms
            .first()
            .and_then(|a| a.first())
            .copied()
            .ok_or_else(|| GraphError::Invalid("no arms".into()))?;
        let g = Self { start, arms, target_arm, num_nodes };
        g.validate()?;
        Ok(g)
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn arm_len(&self) -> usize {
        self.arms[0].len()
    }

    /// The arm from `start` to the target (R_t).
    pub fn target_path(&self) -> &[NodeId] {
        &self.arms[self.target_arm]
    }

    pub fn target(&self) -> NodeId {
        *self.target_path().last().unwrap()
    }

    pub fn leading(&self) -> NodeId {
        self.target_path()[1]
    }

    /// Children of the start node, one per arm.
    pub fn leading_nodes(&self) -> Vec<NodeId> {
        self.arms.iter().map(|a| a[1]).collect()
    }

    pub fn node_count(&self) -> usize {
        graph_node_count(self.num_arms(), self.arm_len())
    }

    /// Parent-to-child edges, arm by arm in path order.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.arms
            .iter()
            .flat_map(|arm| arm.windows(2).map(|w| (w[0], w[1])))
            .collect()
    }

    pub fn degrees(&self) -> HashMap<NodeId, usize> {
        let mut deg = HashMap::new();
        for (u, v) in self.edges() {
            *deg.entry(u).or_insert(0) += 1;
            *deg.entry(v).or_insert(0) += 1;
        }
        deg
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let d = self.arms.len();
        if d < 2 {
            return Err(GraphError::TooFewArms(d));
        }
        let m = self.arms[0].len();
        check_shape(d, m, self.num_nodes)?;
        if self.target_arm >= d {
            return Err(GraphError::Invalid(format!("target arm {} of {d}", self.target_arm)));
        }
        let mut seen = BTreeSet::new();
        seen.insert(self.start);
        for (i, arm) in self.arms.iter().enumerate() {
            if arm.len() != m {
                return Err(GraphError::Invalid(format!("arm {i} has {} nodes, expected {m}", arm.len())));
            }
            if arm[0] != self.start {
                return Err(GraphError::Invalid(format!("arm {i} does not begin at the start node")));
            }
            for &n in &arm[1..] {
                if n == 0 || n as usize > self.num_nodes {
                    return Err(GraphError::Invalid(format!("node {n} outside 1..={}", self.num_nodes)));
                }
                if !seen.insert(n) {
                    return Err(GraphError::Invalid(format!("node {n} repeated")));
                }
            }
        }
        if self.start == 0 || self.start as usize > self.num_nodes {
            return Err(GraphError::Invalid(format!("start {} out of range", self.start)));
        }
        debug_assert_eq!(seen.len(), graph_node_count(d, m));
        Ok(())
    }
}

/// Samples a path-star graph with distinct labels drawn without replacement
/// from `1..=num_nodes` and a uniformly chosen target arm.
pub fn sample_path_star(
    d: usize,
    m: usize,
    num_nodes: usize,
    rng: &mut Rng,
) -> Result<PathStarGraph, GraphError> {
    check_shape(d, m, num_nodes)?;
    let need = graph_node_count(d, m);
    let labels = rand::seq::index::sample(rng, num_nodes, need);
    let mut labels = labels.into_iter().map(|i| i as NodeId + 1);
    let start = labels.next().unwrap();
    let arms = (0..d)
        .map(|_| {
            let mut arm = Vec::with_capacity(m);
            arm.push(start);
            arm.extend(labels.by_ref().take(m - 1));
            arm
        })
        .collect();
    let target_arm = rng.random_range(0..d);
    Ok(PathStarGraph { start, arms, target_arm, num_nodes })
}

/// Exact number of distinct (labelling, target) outcomes:
/// `|V|! / (|V| - D(M-1) - 1)! * D`.
pub fn sample_space_size(d: usize, m: usize, num_nodes: usize) -> Result<BigUint, GraphError> {
    check_shape(d, m, num_nodes)?;
    let need = graph_node_count(d, m);
    let falling = ((num_nodes - need + 1)..=num_nodes)
        .fold(BigUint::from(1u32), |acc, k| acc * BigUint::from(k));
    Ok(falling * BigUint::from(d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeVariant {
    DAry,
    Split,
}

/// Branching law for d-ary trees: no branch, 2, 3 or 4 children.
pub const DARY_BRANCH_PROBS: [f64; 4] = [0.3, 0.4, 0.2, 0.1];
pub const SPLIT_PROB: f64 = 0.5;

/// Number of children at a d-ary decision point (1 means "no branch").
pub fn sample_dary_branching(rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in DARY_BRANCH_PROBS.iter().enumerate() {
        acc += p;
        if u < acc {
            return i + 1;
        }
    }
    DARY_BRANCH_PROBS.len()
}

/// A tree-star graph: each arm of a path-star graph is reshaped into a tree
/// whose pre-order traversal is the original arm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StarTree {
    pub start: NodeId,
    pub children: BTreeMap<NodeId, Vec<NodeId>>,
    pub variant: TreeVariant,
    pub target: NodeId,
    /// Reference pre-order traversal of the target arm, `start` to `target`.
    pub traversal: Vec<NodeId>,
    /// Reference traversal of every arm (each begins with `start`).
    pub arms: Vec<Vec<NodeId>>,
    pub target_arm: usize,
    pub num_nodes: usize,
}

impl StarTree {
    pub fn children_of(&self, n: NodeId) -> &[NodeId] {
        self.children.get(&n).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        // Walk arms so the edge order is reproducible.
        let mut stack: Vec<NodeId> = vec![self.start];
        while let Some(u) = stack.pop() {
            for &v in self.children_of(u).iter().rev() {
                stack.push(v);
            }
            for &v in self.children_of(u) {
                out.push((u, v));
            }
        }
        out
    }

    pub fn parents(&self) -> HashMap<NodeId, NodeId> {
        self.children
            .iter()
            .flat_map(|(&p, cs)| cs.iter().map(move |&c| (c, p)))
            .collect()
    }

    /// Nodes from the start node down to `target`.
    pub fn root_path(&self) -> Vec<NodeId> {
        let parents = self.parents();
        let mut path = vec![self.target];
        let mut cur = self.target;
        while let Some(&p) = parents.get(&cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn arm_len(&self) -> usize {
        self.arms[0].len()
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }
}

fn build_arm_tree(
    seq: &[NodeId],
    variant: TreeVariant,
    on_spine: bool,
    rng: &mut Rng,
    children: &mut BTreeMap<NodeId, Vec<NodeId>>,
) {
    let root = seq[0];
    let rest = &seq[1..];
    if rest.is_empty() {
        return;
    }
    let r = rest.len();
    let k = match variant {
        TreeVariant::DAry => sample_dary_branching(rng).min(r),
        TreeVariant::Split => {
            if on_spine && r >= 2 && rng.random_bool(SPLIT_PROB) {
                2
            } else {
                1
            }
        }
    };
    // Equal division; the remainder goes to the earliest subtree.
    let base = r / k;
    let extra = r % k;
    let mut offset = 0;
    let mut kids = Vec::with_capacity(k);
    for c in 0..k {
        let size = base + if c == 0 { extra } else { 0 };
        let segment = &rest[offset..offset + size];
        offset += size;
        kids.push(segment[0]);
        let child_on_spine = match variant {
            TreeVariant::DAry => true,
            // Only the last subtree (the one holding the arm end) may split again.
            TreeVariant::Split => on_spine && c == k - 1,
        };
        build_arm_tree(segment, variant, child_on_spine, rng, children);
    }
    children.insert(root, kids);
}

/// Samples a tree-star graph. Node labels and the target are drawn exactly as
/// for the path-star graph with the same shape; each arm's nodes are then
/// arranged into a tree whose pre-order traversal is the arm.
pub fn sample_tree_star(
    d: usize,
    m: usize,
    num_nodes: usize,
    variant: TreeVariant,
    rng: &mut Rng,
) -> Result<StarTree, GraphError> {
    let g = sample_path_star(d, m, num_nodes, rng)?;
    Ok(tree_from_path_star(&g, variant, rng))
}

/// Reshapes every arm of `g` into a tree of the given variant.
pub fn tree_from_path_star(g: &PathStarGraph, variant: TreeVariant, rng: &mut Rng) -> StarTree {
    let mut children = BTreeMap::new();
    children.insert(g.start, g.leading_nodes());
    for arm in &g.arms {
        build_arm_tree(&arm[1..], variant, true, rng, &mut children);
    }
    StarTree {
        start: g.start,
        children,
        variant,
        target: g.target(),
        traversal: g.target_path().to_vec(),
        arms: g.arms.clone(),
        target_arm: g.target_arm,
        num_nodes: g.num_nodes,
    }
}

/// Either graph family, as consumed by the tokenizer and data pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskGraph {
    Path(PathStarGraph),
    Tree(StarTree),
}

impl TaskGraph {
    pub fn start(&self) -> NodeId {
        match self {
            TaskGraph::Path(g) => g.start,
            TaskGraph::Tree(t) => t.start,
        }
    }

    pub fn target(&self) -> NodeId {
        match self {
            TaskGraph::Path(g) => g.target(),
            TaskGraph::Tree(t) => t.target,
        }
    }

    /// The sequence the model must generate: R_t for paths, the reference
    /// pre-order traversal for trees.
    pub fn target_sequence(&self) -> &[NodeId] {
        match self {
            TaskGraph::Path(g) => g.target_path(),
            TaskGraph::Tree(t) => &t.traversal,
        }
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        match self {
            TaskGraph::Path(g) => g.edges(),
            TaskGraph::Tree(t) => t.edges(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        match self {
            TaskGraph::Path(g) => g.num_nodes,
            TaskGraph::Tree(t) => t.num_nodes,
        }
    }

    pub fn num_arms(&self) -> usize {
        match self {
            TaskGraph::Path(g) => g.num_arms(),
            TaskGraph::Tree(t) => t.num_arms(),
        }
    }

    pub fn arm_len(&self) -> usize {
        match self {
            TaskGraph::Path(g) => g.arm_len(),
            TaskGraph::Tree(t) => t.arm_len(),
        }
    }

    /// All nodes of the graph.
    pub fn nodes(&self) -> BTreeSet<NodeId> {
        let arms = match self {
            TaskGraph::Path(g) => &g.arms,
            TaskGraph::Tree(t) => &t.arms,
        };
        arms.iter().flatten().copied().collect()
    }

    pub fn as_path(&self) -> Option<&PathStarGraph> {
        match self {
            TaskGraph::Path(g) => Some(g),
            TaskGraph::Tree(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMode {
    /// Uniform permutation of all edges.
    EdgeWise,
    /// Arms kept contiguous and in path order; arm blocks permuted.
    ArmWise,
    /// Same-arm edges in path order, arms interleaved.
    CausalWise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeList {
    pub edges: Vec<(NodeId, NodeId)>,
    pub mode: ShuffleMode,
}

/// Orders the edges of `graph` under `mode`.
pub fn edge_list(graph: &TaskGraph, mode: ShuffleMode, rng: &mut Rng) -> Result<EdgeList, GraphError> {
    let edges = match (graph, mode) {
        (_, ShuffleMode::EdgeWise) => {
            let mut e = graph.edges();
            e.shuffle(rng);
            e
        }
        (TaskGraph::Tree(_), mode) => return Err(GraphError::ShuffleNotSupported { mode }),
        (TaskGraph::Path(g), ShuffleMode::ArmWise) => {
            let mut order: Vec<usize> = (0..g.num_arms()).collect();
            order.shuffle(rng);
            order
                .into_iter()
                .flat_map(|a| g.arms[a].windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>())
                .collect()
        }
        (TaskGraph::Path(g), ShuffleMode::CausalWise) => {
            // Repeatedly pick an arm with edges left and take its edge
            // closest to the start node.
            let mut next = vec![0usize; g.num_arms()];
            let per_arm = g.arm_len() - 1;
            let mut live: Vec<usize> = (0..g.num_arms()).collect();
            let mut out = Vec::with_capacity(per_arm * g.num_arms());
            while !live.is_empty() {
                let slot = rng.random_range(0..live.len());
                let a = live[slot];
                let i = next[a];
                out.push((g.arms[a][i], g.arms[a][i + 1]));
                next[a] += 1;
                if next[a] == per_arm {
                    live.swap_remove(slot);
                }
            }
            out
        }
    };
    Ok(EdgeList { edges, mode })
}

impl EdgeList {
    /// Checks that the list holds every edge of `graph` exactly once and
    /// honours its shuffle discipline.
    pub fn validate(&self, graph: &TaskGraph) -> Result<(), GraphError> {
        let mut want: Vec<_> = graph.edges();
        let mut have = self.edges.clone();
        want.sort_unstable();
        have.sort_unstable();
        if want != have {
            return Err(GraphError::Invalid("edge list is not the graph's edge set".into()));
        }
        let g = match (graph, self.mode) {
            (_, ShuffleMode::EdgeWise) => return Ok(()),
            (TaskGraph::Tree(_), mode) => return Err(GraphError::ShuffleNotSupported { mode }),
            (TaskGraph::Path(g), _) => g,
        };
        let index: HashMap<(NodeId, NodeId), usize> =
            self.edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        for arm in &g.arms {
            let pos: Vec<usize> = arm.windows(2).map(|w| index[&(w[0], w[1])]).collect();
            if pos.windows(2).any(|p| p[0] >= p[1]) {
                return Err(GraphError::Invalid("same-arm edges out of path order".into()));
            }
            if self.mode == ShuffleMode::ArmWise && pos.last().unwrap() - pos[0] != pos.len() - 1 {
                return Err(GraphError::Invalid("arm block is not contiguous".into()));
            }
        }
        Ok(())
    }
}
