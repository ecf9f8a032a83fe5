//! Training-time interventions: mask/replacement plans, auxiliary
//! multi-token targets, scratchpads and tree child smoothing.

use std::collections::{BTreeSet, HashSet};

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeId, PathStarGraph, StarTree};
use crate::rng::Rng;
use crate::tokenizer::{Token, Vocabulary, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    Keep,
    Mask,
    Replace(NodeId),
}

/// One action per maskable target-side input position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub actions: Vec<MaskAction>,
}

impl MaskPlan {
    pub fn keep_all(len: usize) -> Self {
        Self { actions: vec![MaskAction::Keep; len] }
    }

    pub fn num_noised(&self) -> usize {
        self.actions.iter().filter(|a| !matches!(a, MaskAction::Keep)).count()
    }

    /// Rewrites `inputs` in place. Labels are never touched.
    pub fn apply(&self, vocab: &Vocabulary, inputs: &mut [Token]) {
        assert_eq!(inputs.len(), self.actions.len(), "plan length must match the span it covers");
        for (tok, action) in inputs.iter_mut().zip(&self.actions) {
            match *action {
                MaskAction::Keep => {}
                MaskAction::Mask => *tok = MASK,
                MaskAction::Replace(n) => *tok = vocab.node(n),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Replace with the mask token.
    #[default]
    Dropout,
    /// Replace with a node drawn uniformly (with replacement) from the universe.
    Replace,
    /// Each noised position is dropout or replacement with probability 1/2.
    Mixed,
}

fn noise_action(noise: NoiseKind, num_nodes: usize, rng: &mut Rng) -> MaskAction {
    let replace = match noise {
        NoiseKind::Dropout => false,
        NoiseKind::Replace => true,
        NoiseKind::Mixed => rng.random_bool(0.5),
    };
    if replace {
        MaskAction::Replace(rng.random_range(1..=num_nodes as NodeId))
    } else {
        MaskAction::Mask
    }
}

/// Independent per-position Bernoulli(`rate`) masking.
pub fn sample_uniform_mask(
    len: usize,
    rate: f64,
    noise: NoiseKind,
    num_nodes: usize,
    rng: &mut Rng,
) -> MaskPlan {
    assert!((0.0..=1.0).contains(&rate), "mask rate {rate} outside [0, 1]");
    let actions = (0..len)
        .map(|_| {
            if rng.random_bool(rate) {
                noise_action(noise, num_nodes, rng)
            } else {
                MaskAction::Keep
            }
        })
        .collect();
    MaskPlan { actions }
}

/// Masks exactly `round(rate * len)` positions chosen uniformly.
pub fn sample_uniform_count_mask(
    len: usize,
    rate: f64,
    noise: NoiseKind,
    num_nodes: usize,
    rng: &mut Rng,
) -> MaskPlan {
    assert!((0.0..=1.0).contains(&rate), "mask rate {rate} outside [0, 1]");
    let k = (rate * len as f64).round() as usize;
    let mut plan = MaskPlan::keep_all(len);
    for i in rand::seq::index::sample(rng, len, k.min(len)) {
        plan.actions[i] = noise_action(noise, num_nodes, rng);
    }
    plan
}

/// Draws a span length in `{1, 2, ...}` with mean `1/p`.
pub fn sample_geometric(p: f64, rng: &mut Rng) -> usize {
    assert!(p > 0.0 && p <= 1.0, "geometric parameter {p} outside (0, 1]");
    Geometric::new(p).expect("valid geometric parameter").sample(rng) as usize + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub masked: bool,
    pub len: usize,
}

/// Alternating mask/keep spans tiling `len` positions. The first span type is
/// a fair coin; the final span is truncated to fit.
pub fn sample_spans(len: usize, p_mask: f64, p_keep: f64, rng: &mut Rng) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut masked = rng.random_bool(0.5);
    let mut covered = 0;
    while covered < len {
        let want = sample_geometric(if masked { p_mask } else { p_keep }, rng);
        let take = want.min(len - covered);
        spans.push(Span { masked, len: take });
        covered += take;
        masked = !masked;
    }
    spans
}

/// Span masking: geometric mask spans (`p_mask`) alternate with geometric
/// ground-truth spans (`p_keep`).
pub fn sample_span_plan(
    len: usize,
    p_mask: f64,
    p_keep: f64,
    noise: NoiseKind,
    num_nodes: usize,
    rng: &mut Rng,
) -> MaskPlan {
    let spans = sample_spans(len, p_mask, p_keep, rng);
    let mut actions = Vec::with_capacity(len);
    for span in spans {
        for _ in 0..span.len {
            actions.push(if span.masked {
                noise_action(noise, num_nodes, rng)
            } else {
                MaskAction::Keep
            });
        }
    }
    MaskPlan { actions }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    /// Uniform weights over the remaining future tokens.
    Bow,
    /// Linearly decreasing weights over the remaining future tokens.
    Ls,
    /// Pairwise hinge ranking into the future.
    Ritf,
}

/// Future tokens reachable from one arm step, with their weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTargets {
    pub future: Vec<NodeId>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxTargets {
    pub kind: AuxKind,
    pub arm: Vec<NodeId>,
    pub steps: Vec<StepTargets>,
    /// `(i, j, k)` arm indices with `i <= j < k`: at step `i`, arm node `j`
    /// must outscore arm node `k`.
    pub intra: Vec<(usize, usize, usize)>,
    /// `(i, j, k)`: at step `i`, arm node `arm[j]` must outscore node `k`,
    /// which is not on the arm.
    pub inner: Vec<(usize, usize, NodeId)>,
}

impl AuxTargets {
    /// Distinct ordered arm pairs ranked by the intra loss, `M(M-1)/2`.
    pub fn distinct_intra_pairs(&self) -> usize {
        self.intra.iter().map(|&(_, j, k)| (j, k)).collect::<BTreeSet<_>>().len()
    }
}

/// Linearly decreasing weights `(F, F-1, .., 1)` raised to `1/temperature`
/// and normalised. `temperature = 1` keeps equal consecutive differences.
pub fn ls_weights(horizon: usize, temperature: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..horizon)
        .map(|r| ((horizon - r) as f64).powf(1.0 / temperature))
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / z).collect()
}

/// Builds per-step future-token targets for `arm`; for ranking also the intra
/// and inner-arm pair lists over a universe of `num_nodes` labels.
pub fn build_aux_targets(arm: &[NodeId], num_nodes: usize, kind: AuxKind, temperature: f64) -> AuxTargets {
    let m = arm.len();
    assert!(m >= 2, "arm must have at least two nodes");
    let steps = (0..m)
        .map(|i| {
            let future = arm[i..].to_vec();
            let f = future.len();
            let weights = match kind {
                AuxKind::Ls => ls_weights(f, temperature),
                AuxKind::Bow | AuxKind::Ritf => vec![1.0 / f as f64; f],
            };
            StepTargets { future, weights }
        })
        .collect();
    let (mut intra, mut inner) = (Vec::new(), Vec::new());
    if kind == AuxKind::Ritf {
        for i in 0..m {
            for j in i..m {
                for k in j + 1..m {
                    intra.push((i, j, k));
                }
            }
        }
        let on_arm: HashSet<NodeId> = arm.iter().copied().collect();
        let off_arm: Vec<NodeId> = (1..=num_nodes as NodeId).filter(|n| !on_arm.contains(n)).collect();
        for i in 0..m {
            for j in 0..m {
                for &k in &off_arm {
                    inner.push((i, j, k));
                }
            }
        }
    }
    AuxTargets { kind, arm: arm.to_vec(), steps, intra, inner }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RitfError {
    #[error("expected {expected} score vectors, got {got}")]
    StepCount { expected: usize, got: usize },
    #[error("token {token} is outside a score vector of length {len}")]
    OutOfVocabulary { token: Token, len: usize },
}

/// Hinge ranking loss over `targets` given per-step score vectors indexed by
/// token id. Returns the summed loss and its (sub)gradient; a pair exactly at
/// the margin contributes neither loss nor gradient.
pub fn ritf_loss<T: Float>(
    scores: &[Vec<T>],
    targets: &AuxTargets,
    vocab: &Vocabulary,
    hinge: T,
) -> Result<(T, Vec<Vec<T>>), RitfError> {
    let m = targets.arm.len();
    if scores.len() != m {
        return Err(RitfError::StepCount { expected: m, got: scores.len() });
    }
    let arm_tok: Vec<Token> = targets.arm.iter().map(|&n| vocab.node(n)).collect();
    let mut grad: Vec<Vec<T>> = scores.iter().map(|s| vec![T::zero(); s.len()]).collect();
    let mut loss = T::zero();
    let mut pair = |i: usize, hi: Token, lo: Token, grad: &mut Vec<Vec<T>>| -> Result<(), RitfError> {
        let len = scores[i].len();
        for t in [hi, lo] {
            if t as usize >= len {
                return Err(RitfError::OutOfVocabulary { token: t, len });
            }
        }
        let slack = hinge - (scores[i][hi as usize] - scores[i][lo as usize]);
        if slack > T::zero() {
            loss = loss + slack;
            grad[i][hi as usize] = grad[i][hi as usize] - T::one();
            grad[i][lo as usize] = grad[i][lo as usize] + T::one();
        }
        Ok(())
    };
    for &(i, j, k) in &targets.intra {
        pair(i, arm_tok[j], arm_tok[k], &mut grad)?;
    }
    for &(i, j, k) in &targets.inner {
        pair(i, arm_tok[j], vocab.node(k), &mut grad)?;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairDirection {
    /// Leading node, then target node.
    LeadingToTarget,
    TargetToLeading,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSortKey {
    Leading,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScratchpadVariant {
    /// The arm reversed.
    Reverse,
    /// A random permutation of the arm (start node excluded), trained with
    /// smoothed targets over every not-yet-emitted arm node.
    Bow,
    /// The arm sorted by node label.
    SortedArm,
    /// The arm itself, with replacement noise on the scratchpad inputs.
    Forward,
    /// One (leading, target) pair per arm.
    GraphRecon { direction: PairDirection, sort_key: PairSortKey },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScratchpadPlan {
    pub variant: ScratchpadVariant,
    pub tokens: Vec<NodeId>,
    /// Valid next tokens at each scratchpad position (singletons unless bow).
    pub valid_targets: Vec<Vec<NodeId>>,
}

impl ScratchpadPlan {
    /// Whether the scratchpad inputs receive replacement noise in training.
    pub fn noised_inputs(&self) -> bool {
        self.variant == ScratchpadVariant::Forward
    }
}

pub fn build_scratchpad(graph: &PathStarGraph, variant: ScratchpadVariant, rng: &mut Rng) -> ScratchpadPlan {
    let arm = graph.target_path();
    let singletons = |tokens: Vec<NodeId>| {
        let valid_targets = tokens.iter().map(|&n| vec![n]).collect();
        ScratchpadPlan { variant, tokens, valid_targets }
    };
    match variant {
        ScratchpadVariant::Reverse => singletons(arm.iter().rev().copied().collect()),
        ScratchpadVariant::Forward => singletons(arm.to_vec()),
        ScratchpadVariant::SortedArm => {
            let mut t = arm.to_vec();
            t.sort_unstable();
            singletons(t)
        }
        ScratchpadVariant::Bow => {
            let mut tokens = arm[1..].to_vec();
            tokens.shuffle(rng);
            let valid_targets = (0..tokens.len())
                .map(|k| {
                    let mut rest = tokens[k..].to_vec();
                    rest.sort_unstable();
                    rest
                })
                .collect();
            ScratchpadPlan { variant, tokens, valid_targets }
        }
        ScratchpadVariant::GraphRecon { direction, sort_key } => {
            let mut pairs: Vec<(NodeId, NodeId)> =
                graph.arms.iter().map(|a| (a[1], *a.last().unwrap())).collect();
            match sort_key {
                PairSortKey::Leading => pairs.sort_by_key(|p| p.0),
                PairSortKey::Target => pairs.sort_by_key(|p| p.1),
            }
            let tokens = pairs
                .into_iter()
                .flat_map(|(l, t)| match direction {
                    PairDirection::LeadingToTarget => [l, t],
                    PairDirection::TargetToLeading => [t, l],
                })
                .collect();
            singletons(tokens)
        }
    }
}

/// Per traversal position, the weighted set of valid next nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSmoothingTargets {
    pub positions: Vec<Vec<(NodeId, f64)>>,
}

/// Candidates for the node after `prefix` in a pre-order traversal of the
/// target subtree that must end at the target. Siblings whose subtree holds
/// the target are excluded while any other sibling is still unvisited.
pub fn next_traversal_candidates(tree: &StarTree, prefix: &[NodeId]) -> Vec<NodeId> {
    let on_path: HashSet<NodeId> = tree.root_path().into_iter().collect();
    let visited: HashSet<NodeId> = prefix.iter().copied().collect();
    let parents = tree.parents();
    let Some(&last) = prefix.last() else {
        return vec![tree.start];
    };
    if last == tree.start {
        // Only the arm holding the target is part of the traversal.
        return tree.children_of(tree.start).iter().copied().filter(|c| on_path.contains(c)).collect();
    }
    let mut cur = Some(last);
    while let Some(u) = cur {
        let open: Vec<NodeId> = tree.children_of(u).iter().copied().filter(|c| !visited.contains(c)).collect();
        if !open.is_empty() && u != tree.start {
            let off: Vec<NodeId> = open.iter().copied().filter(|c| !on_path.contains(c)).collect();
            return if off.is_empty() { open } else { off };
        }
        if u == tree.start {
            break;
        }
        cur = parents.get(&u).copied();
    }
    Vec::new()
}

pub fn build_tree_targets(tree: &StarTree) -> TreeSmoothingTargets {
    let positions = (0..tree.traversal.len())
        .map(|i| {
            let cands = next_traversal_candidates(tree, &tree.traversal[..i]);
            let w = 1.0 / cands.len() as f64;
            cands.into_iter().map(|c| (c, w)).collect()
        })
        .collect();
    TreeSmoothingTargets { positions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{sample_path_star, sample_tree_star, TreeVariant};
    use crate::rng::rng_for;
    use std::collections::BTreeMap;

    fn fig1_arm_graph() -> PathStarGraph {
        PathStarGraph::from_arms(vec![vec![29, 12, 6, 59, 2], vec![29, 1, 3, 4, 5]], 0, 100).unwrap()
    }

    #[test]
    fn uniform_mask_extremes() {
        let mut rng = rng_for(0, 0, 0);
        let p = sample_uniform_mask(10, 0.0, NoiseKind::Dropout, 9, &mut rng);
        assert_eq!(p.num_noised(), 0);
        let p = sample_uniform_mask(10, 1.0, NoiseKind::Dropout, 9, &mut rng);
        assert!(p.actions.iter().all(|a| *a == MaskAction::Mask));
    }

    #[test]
    fn uniform_mask_rate() {
        let mut rng = rng_for(0, 0, 1);
        let p = sample_uniform_mask(100_000, 0.5, NoiseKind::Dropout, 9, &mut rng);
        let f = p.num_noised() as f64 / 1e5;
        assert!((f - 0.5).abs() < 0.01, "{f}");
        let p = sample_uniform_count_mask(10, 0.5, NoiseKind::Dropout, 9, &mut rng);
        assert_eq!(p.num_noised(), 5);
    }

    #[test]
    fn replacement_nodes_come_from_universe() {
        let mut rng = rng_for(0, 0, 2);
        let p = sample_span_plan(1_000, 0.5, 0.8, NoiseKind::Replace, 9, &mut rng);
        for a in &p.actions {
            if let MaskAction::Replace(n) = a {
                assert!((1..=9).contains(n));
            } else {
                assert_eq!(*a, MaskAction::Keep);
            }
        }
        let p = sample_span_plan(10_000, 0.5, 0.8, NoiseKind::Mixed, 9, &mut rng);
        let masks = p.actions.iter().filter(|a| **a == MaskAction::Mask).count() as f64;
        let reps = p.actions.iter().filter(|a| matches!(a, MaskAction::Replace(_))).count() as f64;
        assert!((masks / (masks + reps) - 0.5).abs() < 0.03);
    }

    #[test]
    fn span_plan_tiles_target() {
        let mut rng = rng_for(0, 0, 3);
        for len in 1..20 {
            let spans = sample_spans(len, 0.4, 0.8, &mut rng);
            assert_eq!(spans.iter().map(|s| s.len).sum::<usize>(), len);
            assert!(spans.windows(2).all(|w| w[0].masked != w[1].masked));
            assert_eq!(sample_span_plan(len, 0.4, 0.8, NoiseKind::Dropout, 9, &mut rng).actions.len(), len);
        }
        let spans = sample_spans(1, 0.5, 0.8, &mut rng);
        assert_eq!(spans.len(), 1);
    }

    #[test]
    fn mask_plan_only_rewrites_inputs() {
        let vocab = Vocabulary::new(9);
        let mut inputs = vec![vocab.node(1), vocab.node(2), vocab.node(3)];
        let labels = inputs.clone();
        let plan = MaskPlan { actions: vec![MaskAction::Keep, MaskAction::Mask, MaskAction::Replace(7)] };
        plan.apply(&vocab, &mut inputs);
        assert_eq!(inputs, vec![vocab.node(1), MASK, vocab.node(7)]);
        assert_eq!(labels, vec![vocab.node(1), vocab.node(2), vocab.node(3)]);
    }

    #[test]
    fn aux_pair_counts() {
        let t = build_aux_targets(&[1, 2], 3, AuxKind::Ritf, 1.0);
        assert_eq!(t.intra, vec![(0, 0, 1)]);
        assert_eq!(t.distinct_intra_pairs(), 1);

        let t = build_aux_targets(&[1, 2, 3, 4, 5], 9, AuxKind::Ritf, 1.0);
        assert_eq!(t.distinct_intra_pairs(), 10);
        assert_eq!(t.intra.len(), 10 + 6 + 3 + 1);
        assert_eq!(t.inner.len(), 100);
        assert_eq!(t.steps[4].future, vec![5]);
    }

    #[test]
    fn future_sets_drop_prior_tokens() {
        let t = build_aux_targets(&[4, 8, 1, 6], 9, AuxKind::Bow, 1.0);
        for (i, s) in t.steps.iter().enumerate() {
            assert_eq!(s.future, t.arm[i..].to_vec());
            assert!(s.weights.iter().all(|&w| (w - 1.0 / s.future.len() as f64).abs() < 1e-12));
        }
    }

    #[test]
    fn ls_weights_are_arithmetic() {
        for f in 1..12 {
            let w = ls_weights(f, 1.0);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let d: Vec<f64> = w.windows(2).map(|p| p[0] - p[1]).collect();
            assert!(d.iter().all(|&x| x > 0.0));
            assert!(d.windows(2).all(|p| (p[0] - p[1]).abs() < 1e-12));
        }
    }

    #[test]
    fn ritf_margin_cases() {
        let vocab = Vocabulary::new(3);
        let t = AuxTargets {
            kind: AuxKind::Ritf,
            arm: vec![1, 2],
            steps: vec![],
            intra: vec![(0, 0, 1)],
            inner: vec![],
        };
        let mut s = vec![vec![0.0f64; vocab.size()]; 2];
        s[0][vocab.node(1) as usize] = 2.0;
        let (l, g) = ritf_loss(&s, &t, &vocab, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));
        s[0][vocab.node(1) as usize] = 0.0;
        let (l, _) = ritf_loss(&s, &t, &vocab, 1.0).unwrap();
        assert_eq!(l, 1.0);
        // Exactly at the margin: no loss, zero subgradient.
        s[0][vocab.node(1) as usize] = 1.0;
        let (l, g) = ritf_loss(&s, &t, &vocab, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));
        assert!(matches!(
            ritf_loss(&[vec![0.0; 3], vec![0.0; 3]], &t, &vocab, 1.0),
            Err(RitfError::OutOfVocabulary { .. })
        ));
    }

    #[test]
    fn scratchpad_variants() {
        let g = fig1_arm_graph();
        let mut rng = rng_for(0, 0, 4);
        let sp = build_scratchpad(&g, ScratchpadVariant::Reverse, &mut rng);
        assert_eq!(sp.tokens, vec![2, 59, 6, 12, 29]);
        let sp = build_scratchpad(&g, ScratchpadVariant::SortedArm, &mut rng);
        assert_eq!(sp.tokens, vec![2, 6, 12, 29, 59]);
        let sp = build_scratchpad(&g, ScratchpadVariant::Forward, &mut rng);
        assert_eq!(sp.tokens, g.target_path());
        assert!(sp.noised_inputs());
        let sp = build_scratchpad(&g, ScratchpadVariant::Bow, &mut rng);
        assert_eq!(sp.valid_targets[0], vec![2, 6, 12, 59]);
        for (k, v) in sp.valid_targets.iter().enumerate() {
            assert!(v.contains(&sp.tokens[k]));
            assert_eq!(v.len(), 4 - k);
        }
    }

    #[test]
    fn graph_recon_orders() {
        let g = PathStarGraph::from_arms(
            vec![vec![9, 5, 1, 3], vec![9, 2, 7, 8], vec![9, 4, 6, 10]],
            0,
            10,
        )
        .unwrap();
        let mut rng = rng_for(0, 0, 5);
        let mk = |direction, sort_key, rng: &mut Rng| {
            build_scratchpad(&g, ScratchpadVariant::GraphRecon { direction, sort_key }, rng).tokens
        };
        use PairDirection::*;
        use PairSortKey::*;
        assert_eq!(mk(LeadingToTarget, Leading, &mut rng), vec![2, 8, 4, 10, 5, 3]);
        assert_eq!(mk(TargetToLeading, Leading, &mut rng), vec![8, 2, 10, 4, 3, 5]);
        assert_eq!(mk(LeadingToTarget, Target, &mut rng), vec![5, 3, 2, 8, 4, 10]);
        assert_eq!(mk(TargetToLeading, Target, &mut rng), vec![3, 5, 8, 2, 10, 4]);
    }

    #[test]
    fn dary_branch_weights_exclude_target_child() {
        // start 1 -> 2; 2 has children 3, 4, 5 with the target below 5.
        let mut children = BTreeMap::new();
        children.insert(1, vec![2, 20]);
        children.insert(2, vec![3, 4, 5]);
        children.insert(5, vec![6]);
        children.insert(20, vec![21, 22, 23, 24]);
        let tree = StarTree {
            start: 1,
            children,
            variant: TreeVariant::DAry,
            target: 6,
            traversal: vec![1, 2, 3, 4, 5, 6],
            arms: vec![vec![1, 2, 3, 4, 5, 6], vec![1, 20, 21, 22, 23, 24]],
            target_arm: 0,
            num_nodes: 24,
        };
        let t = build_tree_targets(&tree);
        assert_eq!(t.positions[1], vec![(2, 1.0)]);
        assert_eq!(t.positions[2], vec![(3, 0.5), (4, 0.5)]);
        assert_eq!(t.positions[3], vec![(4, 1.0)]);
        assert_eq!(t.positions[4], vec![(5, 1.0)]);
        assert_eq!(t.positions[5], vec![(6, 1.0)]);
    }

    #[test]
    fn split_tree_targets_are_singletons() {
        for i in 0..1_000 {
            let mut rng = rng_for(1, 0, i);
            let tree = sample_tree_star(3, 7, 19, TreeVariant::Split, &mut rng).unwrap();
            let t = build_tree_targets(&tree);
            for (k, p) in t.positions.iter().enumerate() {
                assert_eq!(p.len(), 1);
                assert_eq!(p[0].0, tree.traversal[k]);
            }
        }
    }

    #[test]
    fn tree_targets_contain_reference_traversal() {
        for i in 0..10_000 {
            let mut rng = rng_for(2, 0, i);
            let tree = sample_tree_star(2, 7, 13, TreeVariant::DAry, &mut rng).unwrap();
            let t = build_tree_targets(&tree);
            for (k, p) in t.positions.iter().enumerate() {
                assert!(p.iter().any(|&(n, w)| n == tree.traversal[k] && w > 0.0));
                assert!((p.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bow_union_at_first_position() {
        let mut rng = rng_for(3, 0, 0);
        let g = sample_path_star(3, 6, 16, &mut rng).unwrap();
        let sp = build_scratchpad(&g, ScratchpadVariant::Bow, &mut rng);
        let mut want = g.target_path()[1..].to_vec();
        want.sort_unstable();
        assert_eq!(sp.valid_targets[0], want);
    }
}
