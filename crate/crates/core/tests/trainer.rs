use std::collections::{HashMap, HashSet};

use pathstar::rng::rng_for;
use pathstar::tokenizer::{Token, PAD};
use pathstar::trainer::data::{supervise, training_instance};
use pathstar::trainer::{make_batch, run_experiment, ExperimentSpec, RunOptions, RunRecord, TrainError};

fn spec(overrides: &[&str]) -> ExperimentSpec {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let s = ExperimentSpec::from_toml_with_overrides("", &o).unwrap();
    s.validate().unwrap();
    s
}

const TINY: [&str; 9] = [
    "model.layers=1",
    "model.dim=16",
    "model.ff_dim=32",
    "train.batch=8",
    "train.micro_batch=4",
    "train.samples=64",
    "eval.every=32",
    "eval.valid_size=8",
    "train.workers=0",
];

fn tiny(extra: &[&str]) -> ExperimentSpec {
    let all: Vec<&str> = TINY.iter().chain(extra).copied().collect();
    spec(&all)
}

fn strip_timing(mut r: RunRecord) -> RunRecord {
    r.wall_clock_secs = 0.0;
    for e in &mut r.evals {
        e.elapsed_secs = 0.0;
    }
    r
}

#[test]
fn batches_are_pure_functions_of_seed_and_index() {
    let s = spec(&["train.batch=64", "supervision.mask=\"uniform\"", "supervision.aux=\"ls\""]);
    let a = make_batch(&s, 3, 17).seqs();
    let b = make_batch(&s, 3, 17).seqs();
    assert_eq!(a, b);
    assert_ne!(a, make_batch(&s, 3, 18).seqs());
    assert_ne!(a, make_batch(&s, 4, 17).seqs());
}

#[test]
fn a_batch_holds_independent_graphs() {
    let s = spec(&["train.batch=1024", "graph.d=5", "graph.m=9"]);
    let b = make_batch(&s, 0, 0);
    assert_eq!(b.items.len(), 1024);
    let distinct: HashSet<Vec<Token>> = b.items.iter().map(|i| i.instance.example.source.clone()).collect();
    assert_eq!(distinct.len(), 1024);
}

#[test]
fn ranges_are_sampled_uniformly() {
    let s = spec(&["graph.d=[2,5]", "graph.m=[2,5]"]);
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    let n = 16_000;
    for g in 0..n {
        let p = training_instance(&s, 1, g).path;
        let (d, m) = (p.num_arms(), p.arm_len());
        assert!((2..=5).contains(&d) && (2..=5).contains(&m));
        *counts.entry((d, m)).or_default() += 1;
    }
    assert_eq!(counts.len(), 16);
    for (k, c) in counts {
        let f = c as f64 / n as f64;
        assert!((f - 1.0 / 16.0).abs() < 0.012, "{k:?}: {f}");
    }
}

#[test]
fn loss_mask_covers_only_target_positions() {
    for extra in [&[][..], &["supervision.scratchpad=\"bow\""], &["graph.tree=\"d_ary\""], &["graph.d=[2,4]", "graph.m=[3,8]"]] {
        let mut o = vec!["train.batch=32"];
        o.extend_from_slice(extra);
        let s = spec(&o);
        let b = make_batch(&s, 0, 2);
        let (tokens, t, mask) = b.padded();
        for (i, item) in b.items.iter().enumerate() {
            let src = item.instance.example.source.len();
            let len = item.supervised.seq.tokens.len();
            for p in 0..t {
                let covered = mask[i * t + p];
                assert_eq!(covered, p + 1 >= src && p < len, "row {i} pos {p}");
                if p >= len {
                    assert_eq!(tokens[i * t + p], PAD);
                }
            }
            assert_eq!(item.supervised.seq.targets.len(), item.instance.example.target.len());
        }
    }
}

#[test]
fn masking_rewrites_inputs_but_never_labels() {
    let plain = spec(&["graph.m=9"]);
    let masked = spec(&["graph.m=9", "supervision.mask=\"span\"", "supervision.noise=\"replace\""]);
    for g in 0..500 {
        let inst = training_instance(&plain, 2, g);
        let a = supervise(&plain, &inst, &mut rng_for(2, 7, g));
        let b = supervise(&masked, &inst, &mut rng_for(2, 7, g));
        assert_eq!(a.seq.targets, b.seq.targets);
        let src = inst.example.source.len();
        assert_eq!(a.seq.tokens[..src + 1], b.seq.tokens[..src + 1], "source and start node are untouched");
    }
}

#[test]
fn tree_streams_mix_in_path_star_graphs() {
    let s = spec(&["graph.tree=\"split\"", "graph.d=3", "graph.m=6"]);
    let n = 100_000;
    let paths = (0..n).filter(|&g| !training_instance(&s, 0, g).is_tree()).count() as f64 / n as f64;
    assert!((paths - 0.10).abs() < 0.01, "{paths}");
}

#[test]
fn online_stream_does_not_repeat() {
    let s = spec(&["graph.d=4", "graph.m=7"]);
    let seen: HashSet<Vec<Token>> = (0..20_000).map(|g| training_instance(&s, 0, g).example.tokens()).collect();
    assert_eq!(seen.len(), 20_000);
}

#[test]
fn offline_mode_replays_the_fixed_corpus_each_epoch() {
    let n = 97;
    let s = spec(&["train.mode=\"offline\"", "train.corpus_size=97", "graph.d=4", "graph.m=7"]);
    let epoch = |e: u64| -> Vec<Vec<Token>> { (e * n..(e + 1) * n).map(|g| training_instance(&s, 5, g).example.tokens()).collect() };
    let first = epoch(0);
    let corpus: HashSet<_> = first.iter().cloned().collect();
    assert_eq!(corpus.len(), n as usize);
    for e in 1..4 {
        let this = epoch(e);
        assert_eq!(this.iter().cloned().collect::<HashSet<_>>(), corpus);
        assert_ne!(this, first, "epoch {e} reuses the same order");
    }
}

#[test]
fn runs_are_reproducible_across_worker_layouts() {
    let base = tiny(&["train.seeds=[0,1,2,3,4]"]);
    let a: Vec<_> = run_experiment(&base, &RunOptions::default()).unwrap().into_iter().map(strip_timing).collect();
    assert_eq!(a.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    let threaded = tiny(&["train.seeds=[0,1,2,3,4]", "train.workers=3", "train.parallel_seeds=true"]);
    let b: Vec<_> = run_experiment(&threaded, &RunOptions::default()).unwrap().into_iter().map(strip_timing).collect();
    assert_eq!(a, b);
    for r in &a {
        assert_eq!(r.samples_seen, 64);
        for e in &r.evals {
            assert_eq!(e.epoch, e.samples as f64 / 1e6);
            assert!(e.grad_norm.is_finite());
        }
    }
    assert_ne!(a[0].evals, a[1].evals);
}

#[test]
fn smoke_config_writes_checkpoints_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let s = tiny(&["graph.shuffle=\"causal_wise\"", "train.checkpoint_every=16"]);
    let opts = RunOptions { out_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    let r = run_experiment(&s, &opts).unwrap();
    let seed_dir = dir.path().join("seed-0");
    assert!(std::fs::read_dir(seed_dir.join("checkpoints")).unwrap().count() >= 1);
    let metrics = std::fs::read_to_string(seed_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), r[0].evals.len());
}

#[test]
fn divergence_aborts_and_names_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let s = tiny(&["train.lr=1e30", "train.checkpoint_every=8", "train.grad_clip=0.0", "train.warmup_steps=0"]);
    let opts = RunOptions { out_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    match run_experiment(&s, &opts) {
        Err(TrainError::NonFinite { last_checkpoint, .. }) => assert!(last_checkpoint.unwrap().exists()),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}
