//! Deterministic sample streams: every example is a pure function of
//! `(spec, seed, index)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::spec::{DataMode, ExperimentSpec, MaskKind};
use crate::evaluator::EvalExample;
use crate::graph::{edge_list, sample_path_star, tree_from_path_star, NodeId, PathStarGraph, TaskGraph};
use crate::nnet::{one_hot, AuxSupervision, SeqExample, SoftLabel, TargetRow};
use crate::rng::{derive_seed, rng_for, stream, Rng};
use crate::supervision::{
    build_aux_targets, build_scratchpad, build_tree_targets, sample_span_plan, sample_uniform_count_mask,
    sample_uniform_mask, MaskPlan, NoiseKind, ScratchpadPlan, TreeSmoothingTargets,
};
use crate::tokenizer::{build_query, eval_query, tokenize, SegmentTag, Token, TokenizedExample, Vocabulary};

/// A sampled graph with its tokenization and any structured targets.
#[derive(Debug, Clone)]
pub struct Instance {
    pub graph: TaskGraph,
    pub path: PathStarGraph,
    pub example: TokenizedExample,
    pub scratchpad: Option<ScratchpadPlan>,
    pub tree_targets: Option<TreeSmoothingTargets>,
}

impl Instance {
    pub fn is_tree(&self) -> bool {
        matches!(self.graph, TaskGraph::Tree(_))
    }
}

/// Samples one instance. Training instances may be trees and use the
/// training query distribution; evaluation instances are always path-star
/// graphs queried with `(s, t)` only.
pub fn sample_instance(spec: &ExperimentSpec, rng: &mut Rng, training: bool) -> Instance {
    let g = &spec.graph;
    let d = rng.random_range(g.d.min..=g.d.max);
    let m = rng.random_range(g.m.min..=g.m.max);
    let path = sample_path_star(d, m, spec.universe(), rng).expect("validated spec yields valid graphs");
    let tree = g.tree.variant().filter(|_| training && !rng.random_bool(g.path_mix));
    let graph = match tree {
        Some(v) => TaskGraph::Tree(tree_from_path_star(&path, v, rng)),
        None => TaskGraph::Path(path.clone()),
    };
    let query = if training { build_query(&graph, g.query, rng) } else { eval_query(&graph, g.query) };
    let shuffle = if matches!(graph, TaskGraph::Tree(_)) { crate::graph::ShuffleMode::EdgeWise } else { g.shuffle };
    let edges = edge_list(&graph, shuffle, rng).expect("shuffle mode validated");
    let scratchpad = spec.supervision.scratchpad_variant().map(|v| build_scratchpad(&path, v, rng));
    let example = tokenize(
        &spec.vocabulary(),
        &graph,
        &edges,
        &query,
        scratchpad.as_ref().map(|p| p.tokens.as_slice()),
        g.layout,
    )
    .expect("generated graphs tokenize");
    let tree_targets = match &graph {
        TaskGraph::Tree(t) => Some(build_tree_targets(t)),
        TaskGraph::Path(_) => None,
    };
    Instance { graph, path, example, scratchpad, tree_targets }
}

fn uniform_label(vocab: &Vocabulary, nodes: &[NodeId]) -> SoftLabel {
    let w = 1.0 / nodes.len() as f64;
    nodes.iter().map(|&n| (vocab.node(n), w)).collect()
}

/// Training sequence with its mask plan (if any).
#[derive(Debug, Clone)]
pub struct Supervised {
    pub seq: SeqExample,
    pub mask: Option<MaskPlan>,
}

/// Applies the supervision spec to an instance: labels on the target side
/// only, masked or replaced target inputs, scratchpad noise and auxiliary
/// future-token targets.
pub fn supervise(spec: &ExperimentSpec, inst: &Instance, rng: &mut Rng) -> Supervised {
    let vocab = spec.vocabulary();
    let sup = &spec.supervision;
    let ex = &inst.example;
    let mut tokens = ex.tokens();
    let src = ex.source.len();
    let arm_start = ex.arm_start();
    let arm = &ex.ground_truth_arm;

    let mut targets = Vec::with_capacity(ex.target.len());
    for (j, &tok) in ex.target.iter().enumerate() {
        let pos = src - 1 + j;
        let k = src + j;
        let label = match ex.segment_tags[k] {
            SegmentTag::Scratchpad if j > 0 => {
                let plan = inst.scratchpad.as_ref().expect("scratchpad tags imply a plan");
                let valid = &plan.valid_targets[j - 1];
                if valid.len() > 1 {
                    uniform_label(&vocab, valid)
                } else {
                    one_hot(tok)
                }
            }
            SegmentTag::Arm => match &inst.tree_targets {
                Some(tt) => tt.positions[k - arm_start].iter().map(|&(n, w)| (vocab.node(n), w)).collect(),
                None => one_hot(tok),
            },
            _ => one_hot(tok),
        };
        targets.push(TargetRow { pos, label });
    }

    let universe = spec.universe();
    let len = arm.len() - 1;
    let mask = match sup.mask {
        MaskKind::None => None,
        MaskKind::Uniform => Some(sample_uniform_mask(len, sup.mask_rate, sup.noise, universe, rng)),
        MaskKind::UniformCount => Some(sample_uniform_count_mask(len, sup.mask_rate, sup.noise, universe, rng)),
        MaskKind::Span => Some(sample_span_plan(len, sup.span_p_mask, sup.span_p_keep, sup.noise, universe, rng)),
    };
    if let Some(plan) = &mask {
        // The start node is never noised; the plan covers l_t..t.
        plan.apply(&vocab, &mut tokens[arm_start + 1..]);
    }
    if let Some(plan) = inst.scratchpad.as_ref().filter(|p| p.noised_inputs()) {
        let sp = sample_span_plan(plan.tokens.len(), sup.sp_noise_p_mask, sup.sp_noise_p_keep, NoiseKind::Replace, universe, rng);
        let start = src + 1;
        sp.apply(&vocab, &mut tokens[start..start + plan.tokens.len()]);
    }
    tokens.pop();

    let aux = match spec.supervision.aux.kind() {
        None => AuxSupervision::None,
        Some(kind) => {
            let at = build_aux_targets(arm, universe, kind, sup.ls_temperature);
            let positions: Vec<usize> = (0..arm.len()).map(|i| arm_start + i - 1).collect();
            if kind == crate::supervision::AuxKind::Ritf {
                AuxSupervision::Ranking { positions, targets: at, vocab }
            } else {
                AuxSupervision::Soft(
                    positions
                        .into_iter()
                        .zip(&at.steps)
                        .map(|(pos, st)| TargetRow {
                            pos,
                            label: st.future.iter().zip(&st.weights).map(|(&n, &w)| (vocab.node(n), w)).collect(),
                        })
                        .collect(),
                )
            }
        }
    };
    Supervised { seq: SeqExample { tokens, targets, aux }, mask }
}

/// Keyed pseudo-random permutation of `0..n` (Feistel network with cycle
/// walking), so an epoch order never needs to be materialised.
pub fn permute_index(i: u64, n: u64, key: u64) -> u64 {
    assert!(i < n);
    let bits = 64 - (n - 1).max(1).leading_zeros();
    let half = bits.div_ceil(2);
    let mask = (1u64 << half) - 1;
    let mut x = i;
    loop {
        let (mut l, mut r) = (x >> half, x & mask);
        for round in 0..4 {
            let f = derive_seed(key, round, r) & mask;
            (l, r) = (r, l ^ f);
        }
        x = (l << half) | r;
        if x < n {
            return x;
        }
    }
}

/// Instance for global training sample `g`.
pub fn training_instance(spec: &ExperimentSpec, seed: u64, g: u64) -> Instance {
    let mut rng = match spec.train.mode {
        DataMode::Online => rng_for(seed, stream::TRAIN, g),
        DataMode::Offline => {
            let n = spec.train.corpus_size;
            let epoch = g / n;
            let idx = permute_index(g % n, n, derive_seed(seed, stream::CORPUS_ORDER, epoch));
            rng_for(seed, stream::DATASET, idx)
        }
    };
    sample_instance(spec, &mut rng, true)
}

#[derive(Debug, Clone)]
pub struct BatchItem {
    pub instance: Instance,
    pub supervised: Supervised,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub index: u64,
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn seqs(&self) -> Vec<SeqExample> {
        self.items.iter().map(|i| i.supervised.seq.clone()).collect()
    }

    pub fn into_seqs(self) -> Vec<SeqExample> {
        self.items.into_iter().map(|i| i.supervised.seq).collect()
    }

    /// Right-padded `[batch, len]` inputs and the matching loss mask.
    pub fn padded(&self) -> (Vec<Token>, usize, Vec<bool>) {
        let seqs: Vec<&[Token]> = self.items.iter().map(|i| i.supervised.seq.tokens.as_slice()).collect();
        let (tokens, t) = crate::nnet::pack(&seqs);
        let mut mask = vec![false; tokens.len()];
        for (b, it) in self.items.iter().enumerate() {
            for r in &it.supervised.seq.targets {
                mask[b * t + r.pos] = true;
            }
        }
        (tokens, t, mask)
    }
}

/// Batch `index` of the training stream for `seed`.
pub fn make_batch(spec: &ExperimentSpec, seed: u64, index: u64) -> Batch {
    let n = spec.train.batch as u64;
    let items = (0..n)
        .map(|i| {
            let g = index * n + i;
            let instance = training_instance(spec, seed, g);
            let mut rng = rng_for(seed, stream::SUPERVISION, g);
            let supervised = supervise(spec, &instance, &mut rng);
            BatchItem { instance, supervised }
        })
        .collect();
    Batch { index, items }
}

/// Fresh validation examples for evaluation round `round`.
pub fn validation_set(spec: &ExperimentSpec, seed: u64, round: u64) -> Vec<EvalExample> {
    let vocab = spec.vocabulary();
    let n = spec.eval.valid_size as u64;
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, stream::VALID, round * n + i);
            let inst = sample_instance(spec, &mut rng, false);
            EvalExample::new(&inst.example, inst.scratchpad.as_ref(), &vocab, inst.path.num_arms())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub index: u64,
    pub variant: String,
}

/// One line of a generated JSONL dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub source_ids: Vec<Token>,
    pub target_ids: Vec<Token>,
    pub segment_tags: Vec<SegmentTag>,
    pub meta: RecordMeta,
}

/// Dataset record `index`: the same examples an offline corpus would hold.
pub fn dataset_record(spec: &ExperimentSpec, seed: u64, index: u64) -> DatasetRecord {
    let mut rng = rng_for(seed, stream::DATASET, index);
    let inst = sample_instance(spec, &mut rng, true);
    let variant = match &inst.graph {
        TaskGraph::Tree(t) => format!("tree_{}", serde_json::to_value(t.variant).unwrap().as_str().unwrap()),
        TaskGraph::Path(_) => "path_star".into(),
    };
    DatasetRecord {
        source_ids: inst.example.source,
        target_ids: inst.example.target,
        segment_tags: inst.example.segment_tags,
        meta: RecordMeta { d: inst.path.num_arms(), m: inst.path.arm_len(), seed, index, variant },
    }
}
