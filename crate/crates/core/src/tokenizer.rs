//! Token layout for the path-star task and its inverse.
//!
//! A source sequence is `/ q.. ? (u v |)* =` (query before graph) or
//! `(u v |)* / q.. ? =` (query after graph). The target is the arm, optionally
//! preceded by `#` and a scratchpad.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EdgeList, NodeId, TaskGraph};
use crate::rng::Rng;

pub type Token = u32;

pub const PAD: Token = 0;
/// `/`
pub const START_QUERY: Token = 1;
/// `?`
pub const END_QUERY: Token = 2;
/// `|`
pub const END_EDGE: Token = 3;
/// `=`
pub const END_GRAPH: Token = 4;
/// `#`
pub const START_SCRATCHPAD: Token = 5;
pub const MASK: Token = 6;
pub const NODE_OFFSET: Token = 6;
pub const NUM_SPECIAL: usize = 7;

/// Bijection between node labels / markers and token ids. Special tokens take
/// ids `0..7`; node `n` maps to `n + 6`, so the mapping is stable across
/// graphs of different sizes that share one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub max_nodes: usize,
}

impl Vocabulary {
    pub fn new(max_nodes: usize) -> Self {
        Self { max_nodes }
    }

    pub fn size(&self) -> usize {
        NUM_SPECIAL + self.max_nodes
    }

    pub fn node(&self, n: NodeId) -> Token {
        debug_assert!(n >= 1 && n as usize <= self.max_nodes, "node {n} outside vocabulary");
        n + NODE_OFFSET
    }

    pub fn node_of(&self, t: Token) -> Option<NodeId> {
        (t > NODE_OFFSET && ((t - NODE_OFFSET) as usize) <= self.max_nodes).then(|| t - NODE_OFFSET)
    }

    pub fn is_node(&self, t: Token) -> bool {
        self.node_of(t).is_some()
    }

    /// Human-readable rendering: markers as in the task description, nodes
    /// as their labels.
    pub fn render(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| match t {
                PAD => "<pad>".to_string(),
                START_QUERY => "/".into(),
                END_QUERY => "?".into(),
                END_EDGE => "|".into(),
                END_GRAPH => "=".into(),
                START_SCRATCHPAD => "#".into(),
                MASK => "<mask>".into(),
                t => match self.node_of(t) {
                    Some(n) => n.to_string(),
                    None => format!("<unk:{t}>"),
                },
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    #[default]
    Standard,
    Subset,
    GeneralSingleTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    QBeforeG,
    QAfterG,
}

/// Query block: observed nodes followed by padding up to `width`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub nodes: Vec<NodeId>,
    pub width: usize,
}

impl Query {
    pub fn num_pads(&self) -> usize {
        self.width - self.nodes.len()
    }
}

/// Samples the training-time query for `mode`.
pub fn build_query(graph: &TaskGraph, mode: QueryMode, rng: &mut Rng) -> Query {
    let arm = graph.target_sequence();
    let s = graph.start();
    match mode {
        QueryMode::Standard => Query { nodes: vec![s, graph.target()], width: 2 },
        QueryMode::Subset => {
            let rest = &arm[1..];
            let k = rng.random_range(1..=rest.len());
            let mut picked: Vec<NodeId> = rand::seq::index::sample(rng, rest.len(), k)
                .into_iter()
                .map(|i| rest[i])
                .collect();
            picked.shuffle(rng);
            let mut nodes = vec![s];
            nodes.extend(picked);
            Query { nodes, width: arm.len() }
        }
        QueryMode::GeneralSingleTarget => {
            let j = rng.random_range(1..arm.len());
            Query { nodes: vec![s, arm[j]], width: arm.len() }
        }
    }
}

/// Evaluation query: only the final node is given, padded to the mode's width.
pub fn eval_query(graph: &TaskGraph, mode: QueryMode) -> Query {
    let width = match mode {
        QueryMode::Standard => 2,
        _ => graph.arm_len(),
    };
    Query { nodes: vec![graph.start(), graph.target()], width }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentTag {
    Query,
    Edge,
    Eog,
    Scratchpad,
    Arm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub source: Vec<Token>,
    /// Optional `#` + scratchpad, then the arm.
    pub target: Vec<Token>,
    /// One tag per token of `source ++ target`.
    pub segment_tags: Vec<SegmentTag>,
    pub ground_truth_arm: Vec<NodeId>,
    /// Scratchpad node tokens (without the `#`), if any.
    pub scratchpad_len: usize,
}

impl TokenizedExample {
    pub fn tokens(&self) -> Vec<Token> {
        let mut t = self.source.clone();
        t.extend_from_slice(&self.target);
        t
    }

    /// Index (in `source ++ target`) of the first scratchpad node, if any.
    pub fn scratchpad_start(&self) -> Option<usize> {
        (self.scratchpad_len > 0).then(|| self.source.len() + 1)
    }

    /// Index of the first arm token.
    pub fn arm_start(&self) -> usize {
        self.source.len() + self.target.len() - self.ground_truth_arm.len()
    }

    /// Length of the prefix that decoding forces (`=` and a possible `#`).
    pub fn forced_prefix_len(&self) -> usize {
        self.source.len() + usize::from(self.scratchpad_len > 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizeError {
    #[error("node {0} is not in the graph")]
    UnknownNode(NodeId),
    #[error("query does not match the graph: {0}")]
    QueryMismatch(String),
    #[error("edge list does not match the graph")]
    EdgeMismatch,
    #[error("node {node} exceeds the vocabulary of {max} nodes")]
    OutOfVocabulary { node: NodeId, max: usize },
}

/// Assembles the model-ready sequence for one example.
pub fn tokenize(
    vocab: &Vocabulary,
    graph: &TaskGraph,
    edges: &EdgeList,
    query: &Query,
    scratchpad: Option<&[NodeId]>,
    layout: Layout,
) -> Result<TokenizedExample, TokenizeError> {
    let nodes = graph.nodes();
    if let Some(&n) = nodes.iter().find(|&&n| n as usize > vocab.max_nodes) {
        return Err(TokenizeError::OutOfVocabulary { node: n, max: vocab.max_nodes });
    }
    if query.nodes.first() != Some(&graph.start()) {
        return Err(TokenizeError::QueryMismatch("query must begin with the start node".into()));
    }
    if query.nodes.len() > query.width {
        return Err(TokenizeError::QueryMismatch("query wider than its block".into()));
    }
    if let Some(&n) = query.nodes.iter().find(|n| !nodes.contains(n)) {
        return Err(TokenizeError::UnknownNode(n));
    }
    if edges.edges.len() != graph.edges().len() {
        return Err(TokenizeError::EdgeMismatch);
    }
    if let Some(&(u, v)) = edges.edges.iter().find(|(u, v)| !nodes.contains(u) || !nodes.contains(v)) {
        return Err(TokenizeError::UnknownNode(if nodes.contains(&u) { v } else { u }));
    }

    let mut q = Vec::with_capacity(query.width + 2);
    q.push(START_QUERY);
    q.extend(query.nodes.iter().map(|&n| vocab.node(n)));
    q.extend(std::iter::repeat_n(PAD, query.num_pads()));
    q.push(END_QUERY);
    let mut g = Vec::with_capacity(edges.edges.len() * 3);
    for &(u, v) in &edges.edges {
        g.extend([vocab.node(u), vocab.node(v), END_EDGE]);
    }

    let mut source = Vec::with_capacity(q.len() + g.len() + 1);
    let mut tags = Vec::with_capacity(source.capacity() + 32);
    let (first, first_tag, second, second_tag) = match layout {
        Layout::QBeforeG => (&q, SegmentTag::Query, &g, SegmentTag::Edge),
        Layout::QAfterG => (&g, SegmentTag::Edge, &q, SegmentTag::Query),
    };
    source.extend_from_slice(first);
    tags.extend(std::iter::repeat_n(first_tag, first.len()));
    source.extend_from_slice(second);
    tags.extend(std::iter::repeat_n(second_tag, second.len()));
    source.push(END_GRAPH);
    tags.push(SegmentTag::Eog);

    let arm = graph.target_sequence();
    let mut target = Vec::new();
    let mut scratchpad_len = 0;
    if let Some(sp) = scratchpad {
        if let Some(&n) = sp.iter().find(|n| !nodes.contains(n)) {
            return Err(TokenizeError::UnknownNode(n));
        }
        target.push(START_SCRATCHPAD);
        target.extend(sp.iter().map(|&n| vocab.node(n)));
        tags.extend(std::iter::repeat_n(SegmentTag::Scratchpad, sp.len() + 1));
        scratchpad_len = sp.len();
    }
    target.extend(arm.iter().map(|&n| vocab.node(n)));
    tags.extend(std::iter::repeat_n(SegmentTag::Arm, arm.len()));

    Ok(TokenizedExample {
        source,
        target,
        segment_tags: tags,
        ground_truth_arm: arm.to_vec(),
        scratchpad_len,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed sequence at token {index}: {kind}")]
pub struct ParseError {
    pub index: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("sequence ended before the end-of-graph marker")]
    Truncated,
    #[error("expected a node token")]
    ExpectedNode,
    #[error("expected end-of-edge marker")]
    ExpectedEndOfEdge,
    #[error("expected end-of-query marker")]
    ExpectedEndOfQuery,
    #[error("unexpected token")]
    Unexpected,
    #[error("query block appears twice")]
    DuplicateQuery,
    #[error("no query block")]
    MissingQuery,
    #[error("edge repeated")]
    DuplicateEdge,
}

/// Adjacency and query recovered from a source sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedExample {
    pub adjacency: BTreeMap<NodeId, Vec<NodeId>>,
    pub edges: Vec<(NodeId, NodeId)>,
    pub query: Vec<NodeId>,
    pub query_width: usize,
    pub layout: Layout,
    /// Number of tokens up to and including `=`.
    pub source_len: usize,
}

/// Parses the source segment of `tokens`; tokens after `=` are ignored.
pub fn parse_example(vocab: &Vocabulary, tokens: &[Token]) -> Result<ParsedExample, ParseError> {
    let err = |index, kind| ParseError { index, kind };
    let mut adjacency: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut edges = Vec::new();
    let mut query: Option<(Vec<NodeId>, usize)> = None;
    let mut layout = None;
    let mut i = 0;
    loop {
        let Some(&t) = tokens.get(i) else {
            return Err(err(i, ParseErrorKind::Truncated));
        };
        match t {
            END_GRAPH => {
                let (query, query_width) = query.ok_or(err(i, ParseErrorKind::MissingQuery))?;
                return Ok(ParsedExample {
                    adjacency,
                    edges,
                    query,
                    query_width,
                    layout: layout.unwrap_or(Layout::QBeforeG),
                    source_len: i + 1,
                });
            }
            START_QUERY => {
                if query.is_some() {
                    return Err(err(i, ParseErrorKind::DuplicateQuery));
                }
                layout.get_or_insert(if edges.is_empty() { Layout::QBeforeG } else { Layout::QAfterG });
                let mut nodes = Vec::new();
                let mut width = 0;
                i += 1;
                loop {
                    match tokens.get(i) {
                        None => return Err(err(i, ParseErrorKind::Truncated)),
                        Some(&END_QUERY) => break,
                        Some(&PAD) => width += 1,
                        Some(&t) => match vocab.node_of(t) {
                            Some(n) if width == nodes.len() => {
                                nodes.push(n);
                                width += 1;
                            }
                            // Nodes after padding or non-node tokens.
                            Some(_) => return Err(err(i, ParseErrorKind::Unexpected)),
                            None => return Err(err(i, ParseErrorKind::ExpectedEndOfQuery)),
                        },
                    }
                    i += 1;
                }
                query = Some((nodes, width));
                i += 1;
            }
            t => {
                let u = vocab.node_of(t).ok_or(err(i, ParseErrorKind::Unexpected))?;
                layout.get_or_insert(Layout::QAfterG);
                let v = match tokens.get(i + 1) {
                    None => return Err(err(i + 1, ParseErrorKind::Truncated)),
                    Some(&t) => vocab.node_of(t).ok_or(err(i + 1, ParseErrorKind::ExpectedNode))?,
                };
                match tokens.get(i + 2) {
                    None => return Err(err(i + 2, ParseErrorKind::Truncated)),
                    Some(&END_EDGE) => {}
                    Some(_) => return Err(err(i + 2, ParseErrorKind::ExpectedEndOfEdge)),
                }
                let kids = adjacency.entry(u).or_default();
                if kids.contains(&v) {
                    return Err(err(i, ParseErrorKind::DuplicateEdge));
                }
                kids.push(v);
                edges.push((u, v));
                i += 3;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{edge_list, sample_path_star, PathStarGraph, ShuffleMode};
    use crate::rng::rng_for;

    fn fig1() -> TaskGraph {
        let arm = [29, 12, 6, 59, 2];
        let mut free: Vec<NodeId> = (1..=100).filter(|n| !arm.contains(n)).collect();
        let mut arms = vec![arm.to_vec()];
        for _ in 0..11 {
            let mut a = vec![29];
            a.extend(free.drain(..4));
            arms.push(a);
        }
        TaskGraph::Path(PathStarGraph::from_arms(arms, 0, 100).unwrap())
    }

    #[test]
    fn fig1_source_layout() {
        let vocab = Vocabulary::new(100);
        let g = fig1();
        let mut rng = rng_for(0, 0, 0);
        let el = edge_list(&g, ShuffleMode::EdgeWise, &mut rng).unwrap();
        let q = build_query(&g, QueryMode::Standard, &mut rng);
        assert_eq!(q.nodes, vec![29, 2]);
        let ex = tokenize(&vocab, &g, &el, &q, None, Layout::QBeforeG).unwrap();
        assert!(vocab.render(&ex.source).starts_with("/ 29 2 ?"));
        assert_eq!(*ex.source.last().unwrap(), END_GRAPH);
        assert_eq!(vocab.render(&ex.target), "29 12 6 59 2");
        assert_eq!(ex.source.len(), 4 + 3 * 48 + 1);
    }

    #[test]
    fn minimal_graph_token_count() {
        let vocab = Vocabulary::new(3);
        let mut rng = rng_for(0, 0, 1);
        let g = TaskGraph::Path(sample_path_star(2, 2, 3, &mut rng).unwrap());
        let el = edge_list(&g, ShuffleMode::EdgeWise, &mut rng).unwrap();
        let q = build_query(&g, QueryMode::Standard, &mut rng);
        let ex = tokenize(&vocab, &g, &el, &q, None, Layout::QBeforeG).unwrap();
        assert_eq!(ex.source.len(), 11);
        assert_eq!(ex.tokens().len(), 11 + 2);
        assert_eq!(ex.segment_tags.len(), 13);
    }

    #[test]
    fn parse_tiny_literal() {
        let vocab = Vocabulary::new(5);
        let toks = [START_QUERY, vocab.node(1), vocab.node(2), END_QUERY, vocab.node(1), vocab.node(2), END_EDGE, END_GRAPH];
        let p = parse_example(&vocab, &toks).unwrap();
        assert_eq!(p.adjacency, BTreeMap::from([(1, vec![2])]));
        assert_eq!(p.query, vec![1, 2]);
        assert_eq!(p.source_len, 8);
    }

    #[test]
    fn parse_truncated_reports_index() {
        let vocab = Vocabulary::new(5);
        let toks = [START_QUERY, vocab.node(1), vocab.node(2), END_QUERY, vocab.node(1), vocab.node(2)];
        let e = parse_example(&vocab, &toks).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::Truncated);
        assert_eq!(e.index, 6);
        let bad = [START_QUERY, vocab.node(1), END_QUERY, vocab.node(1), END_EDGE, END_EDGE, END_GRAPH];
        assert_eq!(parse_example(&vocab, &bad).unwrap_err().index, 4);
    }

    #[test]
    fn subset_query_widths() {
        let mut rng = rng_for(2, 0, 0);
        let g = TaskGraph::Path(sample_path_star(3, 5, 13, &mut rng).unwrap());
        let mut saw_full = false;
        for _ in 0..500 {
            let q = build_query(&g, QueryMode::Subset, &mut rng);
            assert_eq!(q.width, 5);
            assert_eq!(q.nodes[0], g.start());
            assert!(q.nodes[1..].iter().all(|n| g.target_sequence()[1..].contains(n)));
            if q.nodes.len() == 5 {
                saw_full = true;
                assert_eq!(q.num_pads(), 0);
            }
        }
        assert!(saw_full);
    }

    #[test]
    fn general_single_target_is_uniform() {
        let mut rng = rng_for(2, 0, 1);
        let g = TaskGraph::Path(sample_path_star(2, 5, 9, &mut rng).unwrap());
        let arm = g.target_sequence().to_vec();
        let mut counts = BTreeMap::new();
        for _ in 0..10_000 {
            let q = build_query(&g, QueryMode::GeneralSingleTarget, &mut rng);
            assert_eq!(q.width, 5);
            *counts.entry(q.nodes[1]).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 4);
        for n in &arm[1..] {
            let f = counts[n] as f64 / 10_000.0;
            assert!((f - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn padded_query_round_trips() {
        let vocab = Vocabulary::new(13);
        let mut rng = rng_for(2, 0, 3);
        let g = TaskGraph::Path(sample_path_star(3, 5, 13, &mut rng).unwrap());
        let el = edge_list(&g, ShuffleMode::CausalWise, &mut rng).unwrap();
        let q = eval_query(&g, QueryMode::Subset);
        for layout in [Layout::QBeforeG, Layout::QAfterG] {
            let ex = tokenize(&vocab, &g, &el, &q, None, layout).unwrap();
            let p = parse_example(&vocab, &ex.tokens()).unwrap();
            assert_eq!(p.query, q.nodes);
            assert_eq!(p.query_width, 5);
            assert_eq!(p.layout, layout);
            assert_eq!(p.edges, el.edges);
        }
    }

    #[test]
    fn rejects_query_mismatch() {
        let vocab = Vocabulary::new(9);
        let mut rng = rng_for(2, 0, 4);
        let g = TaskGraph::Path(sample_path_star(2, 5, 9, &mut rng).unwrap());
        let el = edge_list(&g, ShuffleMode::EdgeWise, &mut rng).unwrap();
        let missing = (1..=9).find(|n| !g.nodes().contains(n));
        assert!(missing.is_none());
        let q = Query { nodes: vec![g.target(), g.start()], width: 2 };
        assert!(matches!(
            tokenize(&vocab, &g, &el, &q, None, Layout::QBeforeG),
            Err(TokenizeError::QueryMismatch(_))
        ));
        let small = Vocabulary::new(4);
        let q = eval_query(&g, QueryMode::Standard);
        assert!(matches!(
            tokenize(&small, &g, &el, &q, None, Layout::QBeforeG),
            Err(TokenizeError::OutOfVocabulary { .. })
        ));
    }
}
