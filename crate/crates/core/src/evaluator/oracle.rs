//! Independent solvers and shortcut predictors that work from tokens alone.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng as _;
use thiserror::Error;

use super::SequenceModel;
use crate::graph::{NodeId, StarTree};
use crate::nnet::ModelError;
use crate::rng::{derive_seed, rng_for};
use crate::tokenizer::{parse_example, ParseError, Token, Vocabulary, END_GRAPH, PAD};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("query needs the start node and at least one other node")]
    ShortQuery,
    #[error("node {0} has more than one parent")]
    MultipleParents(NodeId),
    #[error("node {0} branches, so the path is not unique")]
    Branching(NodeId),
    #[error("node {node} is unreachable from {start}")]
    Unreachable { node: NodeId, start: NodeId },
    #[error("query node {0} is not on the solved arm")]
    OffPath(NodeId),
    #[error("node {node} has {children} children; a single-edge lookup is ambiguous")]
    Ambiguous { node: NodeId, children: usize },
}

/// Recovers the target arm from the source tokens: walk back from a
/// queried node to the start node, then forward to the end of its arm.
pub fn solve_path_oracle(vocab: &Vocabulary, tokens: &[Token]) -> Result<Vec<NodeId>, OracleError> {
    let parsed = parse_example(vocab, tokens)?;
    let (&s, rest) = parsed.query.split_first().ok_or(OracleError::ShortQuery)?;
    let &probe = rest.last().ok_or(OracleError::ShortQuery)?;
    let mut parent: HashMap<NodeId, NodeId> = HashMap::new();
    for &(u, v) in &parsed.edges {
        if parent.insert(v, u).is_some() {
            return Err(OracleError::MultipleParents(v));
        }
    }
    let mut back = vec![probe];
    let mut cur = probe;
    while cur != s {
        cur = *parent.get(&cur).ok_or(OracleError::Unreachable { node: probe, start: s })?;
        if back.len() > parsed.edges.len() {
            return Err(OracleError::Unreachable { node: probe, start: s });
        }
        back.push(cur);
    }
    back.reverse();
    let mut cur = probe;
    while let Some(kids) = parsed.adjacency.get(&cur) {
        match kids.as_slice() {
            [] => break,
            [v] => {
                back.push(*v);
                cur = *v;
            }
            _ => return Err(OracleError::Branching(cur)),
        }
    }
    if let Some(&q) = rest.iter().find(|q| !back.contains(q)) {
        return Err(OracleError::OffPath(q));
    }
    Ok(back)
}

/// Single-edge lookup for the token at `position`: the unique child of the
/// token before it. `None` when that token is not a node or has no child.
pub fn chc_predict(vocab: &Vocabulary, tokens: &[Token], position: usize) -> Result<Option<NodeId>, OracleError> {
    let parsed = parse_example(vocab, tokens)?;
    let Some(u) = position.checked_sub(1).and_then(|p| vocab.node_of(tokens[p])) else {
        return Ok(None);
    };
    match parsed.adjacency.get(&u).map(Vec::as_slice) {
        None | Some([]) => Ok(None),
        Some([v]) => Ok(Some(*v)),
        Some(kids) => Err(OracleError::Ambiguous { node: u, children: kids.len() }),
    }
}

/// "CHC where possible, uniform over the leading nodes otherwise": the
/// shortcut a teacher-forced model can learn without planning.
pub struct ChcUniformPredictor {
    pub vocab: Vocabulary,
    pub seed: u64,
}

impl SequenceModel for ChcUniformPredictor {
    fn predict(&self, seqs: &[&[Token]], positions: &[Vec<usize>]) -> Result<Vec<Vec<Token>>, ModelError> {
        let mut out = Vec::with_capacity(seqs.len());
        for (seq, pos) in seqs.iter().zip(positions) {
            let parsed = parse_example(&self.vocab, seq).ok();
            let key = seq.iter().fold(self.seed, |h, &t| derive_seed(h, 0, t as u64));
            out.push(
                pos.iter()
                    .map(|&p| {
                        let Some(parsed) = &parsed else { return PAD };
                        let u = seq[p];
                        if u == END_GRAPH {
                            return parsed.query.first().map_or(PAD, |&s| self.vocab.node(s));
                        }
                        let Some(n) = self.vocab.node_of(u) else { return PAD };
                        match parsed.adjacency.get(&n).map(Vec::as_slice) {
                            None | Some([]) => PAD,
                            Some([v]) => self.vocab.node(*v),
                            Some(kids) => {
                                let mut rng = rng_for(key, 0, p as u64);
                                self.vocab.node(kids[rng.random_range(0..kids.len())])
                            }
                        }
                    })
                    .collect(),
            );
        }
        Ok(out)
    }
}

/// Whether `candidate` is a pre-order traversal of the target arm's subtree
/// that ends at the target.
pub fn validate_traversal(tree: &StarTree, candidate: &[NodeId]) -> bool {
    let path: Vec<NodeId> = tree.root_path();
    let on_path: HashSet<NodeId> = path.iter().copied().collect();
    let parents = tree.parents();
    let Some(&root_child) = path.get(1) else {
        return candidate == [tree.start];
    };
    if candidate.first() != Some(&tree.start) || candidate.last() != Some(&tree.target) {
        return false;
    }
    let mut visited: HashSet<NodeId> = HashSet::from([tree.start]);
    let mut prev = tree.start;
    for &x in &candidate[1..] {
        if visited.contains(&x) {
            return false;
        }
        // Pre-order continues below the deepest open ancestor (or self).
        let mut a = prev;
        let open = loop {
            if a == tree.start {
                break None;
            }
            let open: Vec<NodeId> = tree.children_of(a).iter().copied().filter(|c| !visited.contains(c)).collect();
            if !open.is_empty() {
                break Some(open);
            }
            a = parents[&a];
        };
        match open {
            None => {
                if prev != tree.start || x != root_child {
                    return false;
                }
            }
            Some(open) => {
                if !open.contains(&x) || (on_path.contains(&x) && open.len() > 1) {
                    return false;
                }
            }
        }
        visited.insert(x);
        prev = x;
    }
    let mut subtree = 1;
    let mut stack = vec![root_child];
    while let Some(u) = stack.pop() {
        subtree += 1;
        stack.extend(tree.children_of(u));
    }
    visited.len() == subtree
}

fn preorders(children: &BTreeMap<NodeId, Vec<NodeId>>, u: NodeId) -> Vec<Vec<NodeId>> {
    let kids = children.get(&u).cloned().unwrap_or_default();
    let mut out = Vec::new();
    for order in permutations(&kids) {
        let mut acc: Vec<Vec<NodeId>> = vec![vec![u]];
        for c in order {
            let sub = preorders(children, c);
            acc = acc.iter().flat_map(|a| sub.iter().map(move |s| [a.clone(), s.clone()].concat())).collect();
        }
        out.extend(acc);
    }
    out
}

fn permutations(xs: &[NodeId]) -> Vec<Vec<NodeId>> {
    if xs.len() <= 1 {
        return vec![xs.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..xs.len() {
        let mut rest = xs.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Every pre-order of the target arm's subtree (under any child order) that
/// finishes at the target. Exponential; meant for small trees.
pub fn enumerate_traversals(tree: &StarTree) -> Vec<Vec<NodeId>> {
    let path = tree.root_path();
    let Some(&root_child) = path.get(1) else {
        return vec![vec![tree.start]];
    };
    preorders(&tree.children, root_child)
        .into_iter()
        .filter(|t| t.last() == Some(&tree.target))
        .map(|t| [vec![tree.start], t].concat())
        .collect()
}
