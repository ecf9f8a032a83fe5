//! Property audits over a config's generated stream or a JSONL dataset.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{Context, Result};
use pathstar::evaluator::{solve_path_oracle, validate_traversal};
use pathstar::graph::{sample_dary_branching, EdgeList, ShuffleMode, TaskGraph, DARY_BRANCH_PROBS};
use pathstar::nnet::{loss_and_grad, AuxSupervision, LossConfig, Model, ModelConfig, SeqExample, TargetRow};
use pathstar::rng::{rng_for, stream};
use pathstar::supervision::{sample_geometric, sample_spans};
use pathstar::tokenizer::{parse_example, SegmentTag, Token, Vocabulary, NUM_SPECIAL};
use pathstar::trainer::{sample_instance, DatasetRecord, ExperimentSpec, Instance};
use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Property {
    pub name: String,
    pub checked: u64,
    pub failed: u64,
    pub first_failure: Option<String>,
}

impl Property {
    fn new(name: &str) -> Self {
        Self { name: name.into(), checked: 0, failed: 0, first_failure: None }
    }

    fn check(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.failed += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(detail());
            }
        }
    }

    fn result<E: std::fmt::Display>(&mut self, r: Result<(), E>, ctx: impl FnOnce() -> String) {
        match r {
            Ok(()) => self.check(true, String::new),
            Err(e) => self.check(false, || format!("{}: {e}", ctx())),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub passed: bool,
    pub properties: Vec<Property>,
}

impl AuditReport {
    fn new(properties: Vec<Property>) -> Self {
        Self { passed: properties.iter().all(|p| p.failed == 0), properties }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for p in &self.properties {
            let status = if p.failed == 0 { "PASS" } else { "FAIL" };
            s += &format!("{status} {:<22} checked {:>8} failed {:>6}", p.name, p.checked, p.failed);
            if let Some(f) = &p.first_failure {
                s += &format!("  first: {f}");
            }
            s.push('\n');
        }
        s
    }
}

fn audit_instance(spec: &ExperimentSpec, inst: &Instance, i: u64, props: &mut [Property; 4]) {
    let [graph_p, tok_p, oracle_p, order_p] = props;
    let vocab = spec.vocabulary();
    let ctx = || format!("example {i}");
    match &inst.graph {
        TaskGraph::Path(g) => graph_p.result(g.validate(), ctx),
        TaskGraph::Tree(t) => graph_p.check(validate_traversal(t, &t.traversal), || format!("example {i}: reference traversal rejected")),
    }

    let ex = &inst.example;
    let tokens = ex.tokens();
    let parsed = match parse_example(&vocab, &tokens) {
        Ok(p) => p,
        Err(e) => {
            tok_p.check(false, || format!("example {i}: {e}"));
            return;
        }
    };
    let want: BTreeSet<_> = inst.graph.edges().into_iter().collect();
    let got: BTreeSet<_> = parsed.edges.iter().copied().collect();
    let arm: Vec<Token> = inst.graph.target_sequence().iter().map(|&n| vocab.node(n)).collect();
    let len_ok = ex.source.len() == parsed.query_width + 2 + 3 * parsed.edges.len() + 1;
    let tags_ok = ex.segment_tags.len() == tokens.len()
        && ex.segment_tags[ex.arm_start()..].iter().all(|&t| t == SegmentTag::Arm);
    tok_p.check(
        got == want && parsed.edges.len() == want.len() && len_ok && tags_ok && ex.target.ends_with(&arm) && parsed.query.first() == Some(&inst.graph.start()),
        || format!("example {i}: token layout does not round-trip"),
    );

    match &inst.graph {
        TaskGraph::Path(g) => {
            let solved = solve_path_oracle(&vocab, &ex.source);
            oracle_p.check(solved.as_deref() == Ok(g.target_path()), || format!("example {i}: oracle gave {solved:?}"));
        }
        TaskGraph::Tree(t) => oracle_p.check(validate_traversal(t, inst.graph.target_sequence()), || format!("example {i}: target is not a valid traversal")),
    }

    let mode = if inst.is_tree() { ShuffleMode::EdgeWise } else { spec.graph.shuffle };
    let list = EdgeList { edges: parsed.edges.clone(), mode };
    order_p.result(list.validate(&inst.graph), ctx);
}

fn sampler_statistics(spec: &ExperimentSpec, seed: u64) -> Property {
    const N: usize = 100_000;
    let mut p = Property::new("sampler_statistics");
    let mut rng = rng_for(seed, stream::AUDIT, u64::MAX);
    for q in [0.4, 0.5, 0.8] {
        let mean = (0..N).map(|_| sample_geometric(q, &mut rng) as f64).sum::<f64>() / N as f64;
        p.check((mean * q - 1.0).abs() <= 0.02, || format!("span mean {mean:.4} for p={q}"));
    }
    let first = (0..N).filter(|_| sample_spans(8, 0.5, 0.8, &mut rng)[0].masked).count() as f64 / N as f64;
    p.check((first - 0.5).abs() <= 0.01, || format!("mask-first rate {first:.4}"));
    let mut counts = [0usize; 4];
    for _ in 0..N {
        counts[sample_dary_branching(&mut rng) - 1] += 1;
    }
    for (c, want) in counts.iter().zip(DARY_BRANCH_PROBS) {
        let f = *c as f64 / N as f64;
        p.check((f - want).abs() <= 0.02, || format!("d_ary branch frequency {f:.4} vs {want}"));
    }
    if spec.graph.tree.variant().is_some() {
        let paths = (0..N).filter(|_| !sample_instance(spec, &mut rng, true).is_tree()).count() as f64 / N as f64;
        let want = spec.graph.path_mix;
        p.check((paths - want).abs() <= 0.01, || format!("path mix {paths:.4} vs {want}"));
    }
    p
}

/// Central-difference check of a tiny double-precision model.
pub fn gradient_check(seed: u64) -> Property {
    let mut p = Property::new("gradients");
    let cfg = ModelConfig { layers: 2, heads: 2, dim: 8, ff_dim: 16, init_std: 0.3, ..ModelConfig::new(16, 12) };
    let mut model = Model::<f64>::new(cfg, seed).expect("valid tiny config");
    let mut rng = rng_for(seed, stream::AUDIT, u64::MAX - 1);
    let batch: Vec<SeqExample> = [12usize, 9]
        .iter()
        .map(|&len| SeqExample {
            tokens: (0..len).map(|_| rng.random_range(0..16)).collect(),
            targets: (len / 2..len).map(|pos| TargetRow { pos, label: vec![(rng.random_range(0..16), 1.0)] }).collect(),
            aux: AuxSupervision::None,
        })
        .collect();
    let loss = LossConfig::default();
    let mut grads = vec![0.0; model.num_params()];
    loss_and_grad(&model, &batch, &loss, 2, &mut grads).expect("tiny batch is valid");
    let mut scratch = grads.clone();
    let h = 1e-5;
    for i in 0..model.num_params() {
        let orig = model.params[i];
        model.params[i] = orig + h;
        let up = loss_and_grad(&model, &batch, &loss, 2, &mut scratch).expect("valid").loss;
        model.params[i] = orig - h;
        let down = loss_and_grad(&model, &batch, &loss, 2, &mut scratch).expect("valid").loss;
        model.params[i] = orig;
        let num = (up - down) / (2.0 * h);
        let diff = (num - grads[i]).abs();
        let rel = if diff < 1e-8 { 0.0 } else { diff / num.abs().max(grads[i].abs()).max(1e-6) };
        p.check(rel < 1e-3, || format!("parameter {i}: analytic {:.6e} numeric {num:.6e}", grads[i]));
    }
    p
}

/// Audits `n` examples of the config's training stream plus sampler
/// statistics and, optionally, a gradient check.
pub fn audit_config(spec: &ExperimentSpec, seed: u64, n: u64, gradients: bool) -> AuditReport {
    let mut props = [Property::new("graph"), Property::new("tokenization"), Property::new("oracle"), Property::new("edge_order")];
    for i in 0..n {
        let mut rng = rng_for(seed, stream::AUDIT, i);
        let inst = sample_instance(spec, &mut rng, true);
        audit_instance(spec, &inst, i, &mut props);
    }
    let mut all: Vec<Property> = props.into_iter().collect();
    all.push(sampler_statistics(spec, seed));
    if gradients {
        all.push(gradient_check(seed));
    }
    AuditReport::new(all)
}

/// Audits a JSONL dataset record by record. Without a config the node
/// vocabulary is inferred from the largest token id.
pub fn audit_dataset(path: &Path, vocab: Option<Vocabulary>) -> Result<AuditReport> {
    let open = || File::open(path).with_context(|| format!("cannot open dataset {}", path.display()));
    let vocab = match vocab {
        Some(v) => v,
        None => {
            let mut max_id = 0;
            for line in BufReader::new(open()?).lines() {
                let line = line.with_context(|| format!("cannot read {}", path.display()))?;
                if let Ok(r) = serde_json::from_str::<DatasetRecord>(&line) {
                    max_id = r.source_ids.iter().chain(&r.target_ids).copied().fold(max_id, Token::max);
                }
            }
            Vocabulary::new((max_id as usize).saturating_sub(NUM_SPECIAL - 1).max(1))
        }
    };
    let mut schema = Property::new("record_schema");
    let mut parse = Property::new("parse");
    let mut layout = Property::new("layout");
    let mut oracle = Property::new("oracle");
    for (i, line) in BufReader::new(open()?).lines().enumerate() {
        let line = line.with_context(|| format!("cannot read {}", path.display()))?;
        let rec: DatasetRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                schema.check(false, || format!("record {i}: {e}"));
                continue;
            }
        };
        schema.check(true, String::new);
        let tokens: Vec<Token> = rec.source_ids.iter().chain(&rec.target_ids).copied().collect();
        let parsed = match parse_example(&vocab, &tokens) {
            Ok(p) => p,
            Err(e) => {
                parse.check(false, || format!("record {i}: {e}"));
                continue;
            }
        };
        parse.check(true, String::new);
        let m = rec.meta.m;
        let arm_ok = rec.target_ids.len() >= m
            && rec.target_ids[rec.target_ids.len() - m..].iter().all(|&t| vocab.is_node(t))
            && parsed.query.first().map(|&s| vocab.node(s)) == rec.target_ids.get(rec.target_ids.len() - m).copied();
        layout.check(
            parsed.source_len == rec.source_ids.len() && rec.segment_tags.len() == tokens.len() && arm_ok,
            || format!("record {i}: segment layout does not match"),
        );
        if rec.meta.variant == "path_star" {
            let want: Vec<Token> = rec.target_ids[rec.target_ids.len() - m..].to_vec();
            let got = solve_path_oracle(&vocab, &rec.source_ids).map(|a| a.iter().map(|&n| vocab.node(n)).collect::<Vec<_>>());
            oracle.check(got.as_ref() == Ok(&want), || format!("record {i}: oracle gave {got:?}"));
        }
    }
    Ok(AuditReport::new(vec![schema, parse, layout, oracle]))
}
