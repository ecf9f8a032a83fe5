use std::collections::HashMap;

use pathstar::evaluator::{
    aggregate, chc_predict, generative_eval, greedy_generate, rollout, solve_path_oracle, teacher_forced_eval, EvalExample,
    OracleError, SequenceModel, TrialScores,
};
use pathstar::graph::{edge_list, PathStarGraph, ShuffleMode, TaskGraph};
use pathstar::nnet::{argmax, Model, ModelConfig, ModelError};
use pathstar::rng::{derive_seed, rng_for};
use pathstar::tokenizer::{build_query, tokenize, Layout, QueryMode, Token, Vocabulary, MASK};
use pathstar::trainer::{validation_set, ExperimentSpec};
use proptest::prelude::*;
use rand::Rng;

fn spec(overrides: &[&str]) -> ExperimentSpec {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentSpec::from_toml_with_overrides("", &o).unwrap()
}

fn hash(seed: u64, seq: &[Token]) -> u64 {
    seq.iter().fold(seed, |h, &t| derive_seed(h, 1, t as u64))
}

/// Knows every reference continuation and answers correctly with
/// probability `p`, otherwise names a pseudo-random token. Answers depend
/// only on the visible prefix.
struct NoisyOracle {
    full: HashMap<Vec<Token>, Vec<Token>>,
    p: f64,
    vocab: usize,
    seed: u64,
}

impl NoisyOracle {
    fn new(examples: &[EvalExample], p: f64, vocab: usize, seed: u64) -> Self {
        Self { full: examples.iter().map(|e| (e.source.clone(), e.tokens())).collect(), p, vocab, seed }
    }
}

impl SequenceModel for NoisyOracle {
    fn predict(&self, seqs: &[&[Token]], positions: &[Vec<usize>]) -> Result<Vec<Vec<Token>>, ModelError> {
        Ok(seqs
            .iter()
            .zip(positions)
            .map(|(seq, ps)| {
                let src_len = seq.iter().position(|&t| t == 4).unwrap() + 1;
                let full = &self.full[&seq[..src_len]];
                ps.iter()
                    .map(|&p| {
                        let mut rng = rng_for(hash(self.seed, &seq[..=p]), 0, 0);
                        if rng.random_bool(self.p) {
                            full[p + 1]
                        } else {
                            rng.random_range(0..self.vocab) as Token
                        }
                    })
                    .collect()
            })
            .collect())
    }
}

#[test]
fn perfect_model_scores_one_everywhere() {
    let s = spec(&["graph.d=3", "graph.m=6", "eval.valid_size=200", "supervision.scratchpad=\"reverse\""]);
    let ex = validation_set(&s, 0, 0);
    let oracle = NoisyOracle::new(&ex, 1.0, s.vocabulary().size(), 0);
    for r in [teacher_forced_eval(&oracle, &ex).unwrap(), generative_eval(&oracle, &ex).unwrap()] {
        assert_eq!(r.arm_sequence_accuracy, 1.0);
        assert!(r.arm_position_accuracy.iter().all(|&a| a == 1.0));
        assert_eq!(r.scratchpad_sequence_accuracy, Some(1.0));
        assert_eq!(r.token_accuracy, 1.0);
    }
}

#[test]
fn random_predictions_hit_one_over_vocab() {
    let s = spec(&["graph.d=2", "graph.m=5", "eval.valid_size=20000"]);
    let ex = validation_set(&s, 3, 0);
    let v = s.vocabulary().size();
    let model = NoisyOracle::new(&ex, 0.0, v, 11);
    let r = teacher_forced_eval(&model, &ex).unwrap();
    let chance = 1.0 / v as f64;
    for &a in &r.arm_position_accuracy {
        assert!((a - chance).abs() < 0.01, "{a} vs {chance}");
    }
}

#[test]
fn generative_never_beats_teacher_forcing() {
    let s = spec(&["graph.d=[2,4]", "graph.m=[3,6]", "eval.valid_size=24"]);
    let v = s.vocabulary().size();
    for k in 0..1000u64 {
        let ex = validation_set(&s, k, 0);
        let p = rng_for(k, 9, 0).random_range(0.5..1.0);
        let model = NoisyOracle::new(&ex, p, v, k);
        let tf = teacher_forced_eval(&model, &ex).unwrap();
        let gen = generative_eval(&model, &ex).unwrap();
        assert!(gen.arm_sequence_accuracy <= tf.arm_sequence_accuracy, "model {k}");
    }
}

#[test]
fn greedy_decoding_matches_stepwise_argmax() {
    let vocab = 20;
    let mut checked = 0;
    for m in 0..100u64 {
        let cfg = ModelConfig { layers: 1, heads: 2, dim: 8, ff_dim: 16, init_std: 1.0, ..ModelConfig::new(vocab, 32) };
        let model = Model::<f32>::new(cfg, m).unwrap();
        let mut rng = rng_for(m, 5, 0);
        let prefixes: Vec<Vec<Token>> =
            (0..10).map(|_| (0..rng.random_range(1..16)).map(|_| rng.random_range(0..vocab as Token)).collect()).collect();
        let steps: Vec<usize> = prefixes.iter().map(|_| rng.random_range(1..8)).collect();
        let batched = rollout(&model, &prefixes, &steps).unwrap();
        for ((prefix, &n), got) in prefixes.iter().zip(&steps).zip(&batched) {
            let mut seq = prefix.clone();
            for _ in 0..n {
                let f = model.forward(&seq).unwrap();
                let last = &f.logits[(f.seq_len - 1) * vocab..f.seq_len * vocab];
                seq.push(argmax(last) as Token);
            }
            assert_eq!(got, &seq[prefix.len()..]);
            assert_eq!(&greedy_generate(&model, prefix, n, 0).unwrap(), got);
            checked += 1;
        }
    }
    assert_eq!(checked, 1000);
}

#[test]
fn generation_runs_to_max_extra() {
    let model = Model::<f32>::new(ModelConfig::new(12, 40), 1).unwrap();
    assert_eq!(greedy_generate(&model, &[1, 7, 8], 5, 20).unwrap().len(), 25);
}

#[test]
fn ties_go_to_the_lowest_token() {
    assert_eq!(argmax(&[0.5f32, 2.0, 2.0, 1.0]), 1);
    assert_eq!(argmax(&[3.0f64, 3.0]), 0);
}

fn two_arm(s: u32, a: &[u32], b: &[u32], universe: usize) -> TaskGraph {
    let mut x = vec![s];
    x.extend_from_slice(a);
    let mut y = vec![s];
    y.extend_from_slice(b);
    TaskGraph::Path(PathStarGraph::from_arms(vec![x, y], 0, universe).unwrap())
}

fn source_of(g: &TaskGraph, vocab: &Vocabulary, seed: u64) -> Vec<Token> {
    let mut rng = rng_for(seed, 0, 0);
    let el = edge_list(g, ShuffleMode::EdgeWise, &mut rng).unwrap();
    let q = build_query(g, QueryMode::Standard, &mut rng);
    tokenize(vocab, g, &el, &q, None, Layout::QBeforeG).unwrap().source
}

#[test]
fn oracle_on_smallest_graph_returns_start_and_target() {
    let vocab = Vocabulary::new(3);
    let g = two_arm(2, &[3], &[1], 3);
    assert_eq!(solve_path_oracle(&vocab, &source_of(&g, &vocab, 0)).unwrap(), vec![2, 3]);
}

#[test]
fn oracle_rejects_a_target_off_the_graph() {
    let vocab = Vocabulary::new(9);
    // / 1 9 ? 1 2 | 1 3 | =
    let toks = [1, 7, 15, 2, 7, 8, 3, 7, 9, 3, 4];
    assert!(matches!(solve_path_oracle(&vocab, &toks), Err(OracleError::Unreachable { .. }) | Err(OracleError::OffPath(_))));
}

#[test]
fn chc_follows_the_unique_child() {
    let vocab = Vocabulary::new(100);
    let g = two_arm(29, &[12, 6, 59, 2], &[40, 41, 42, 43], 100);
    let mut toks = source_of(&g, &vocab, 4);
    let at = toks.len();
    toks.extend([29, 12, 6].map(|n| vocab.node(n)));
    assert_eq!(chc_predict(&vocab, &toks, at + 2).unwrap(), Some(6));
    assert_eq!(chc_predict(&vocab, &toks, at + 3).unwrap(), Some(59));
    // The start node has two children, so the lookup is ambiguous there.
    assert!(matches!(chc_predict(&vocab, &toks, at + 1), Err(OracleError::Ambiguous { children: 2, .. })));
    toks[at + 1] = MASK;
    assert_eq!(chc_predict(&vocab, &toks, at + 2).unwrap(), None);
}

proptest! {
    #[test]
    fn abb_is_never_below_sr(
        d in 2usize..12,
        trials in prop::collection::vec((0.0f64..=1.0, prop::option::of(0.0f64..=1.0)), 1..8),
    ) {
        let t: Vec<TrialScores> = trials
            .iter()
            .enumerate()
            .map(|(i, &(tf, gen))| TrialScores { seed: i as u64, teacher_forced: tf, generative: gen })
            .collect();
        let row = aggregate("x", &d.to_string(), "5", d, &t);
        prop_assert!(row.test_force_abb >= row.test_force_sr);
        if let (Some(sr), Some(abb)) = (row.test_gen_sr, row.test_gen_abb) {
            prop_assert!(abb >= sr);
        }
        prop_assert!((0.0..=100.0).contains(&row.test_force_sr));
    }
}
