use pathstar::nnet::{
    loss_and_grad, next_token_loss, one_hot, AdamConfig, AuxSupervision, LossConfig, Model, ModelConfig, SeqExample,
    TargetRow, Trainer,
};
use pathstar::rng::rng_for;
use pathstar::supervision::{build_aux_targets, AuxKind};
use pathstar::tokenizer::Vocabulary;
use rand::Rng;

fn tiny(aux: bool) -> ModelConfig {
    ModelConfig { layers: 2, heads: 2, dim: 8, ff_dim: 32, aux_head: aux, init_std: 0.3, ..ModelConfig::new(20, 16) }
}

fn random_example(seed: u64, len: usize, vocab: usize) -> SeqExample {
    let mut rng = rng_for(seed, 0, 0);
    let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
    let targets = (len / 2..len)
        .map(|pos| {
            let a = rng.random_range(0..vocab as u32);
            let b = (a + 1) % vocab as u32;
            TargetRow { pos, label: vec![(a, 0.7), (b, 0.3)] }
        })
        .collect();
    SeqExample { tokens, targets, aux: AuxSupervision::None }
}

fn check_gradients(model: &mut Model<f64>, batch: &[SeqExample], cfg: &LossConfig) {
    let mut grads = vec![0.0; model.num_params()];
    loss_and_grad(model, batch, cfg, 2, &mut grads).unwrap();
    let h = 1e-5;
    let mut scratch = vec![0.0; model.num_params()];
    let mut worst: f64 = 0.0;
    for i in 0..model.num_params() {
        let orig = model.params[i];
        model.params[i] = orig + h;
        let up = loss_and_grad(model, batch, cfg, 2, &mut scratch).unwrap().loss;
        model.params[i] = orig - h;
        let down = loss_and_grad(model, batch, cfg, 2, &mut scratch).unwrap().loss;
        model.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - grads[i]).abs() / numeric.abs().max(grads[i].abs()).max(1e-6);
        assert!(rel < 1e-3, "param {i}: analytic {} numeric {numeric} rel {rel}", grads[i]);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-3);
}

#[test]
fn gradients_match_central_differences() {
    let mut model = Model::<f64>::new(tiny(false), 1).unwrap();
    let batch = vec![random_example(1, 16, 20), random_example(2, 11, 20), random_example(3, 16, 20)];
    check_gradients(&mut model, &batch, &LossConfig::default());
}

#[test]
fn gradients_match_with_auxiliary_heads() {
    let mut model = Model::<f64>::new(tiny(true), 2).unwrap();
    let vocab = Vocabulary::new(13);
    let mut soft = random_example(4, 16, 20);
    soft.aux = AuxSupervision::Soft(vec![
        TargetRow { pos: 9, label: vec![(8, 0.5), (9, 0.5)] },
        TargetRow { pos: 12, label: one_hot(10) },
    ]);
    let mut ranked = random_example(5, 14, 20);
    let targets = build_aux_targets(&[1, 4, 7], 13, AuxKind::Ritf, 1.0);
    ranked.aux = AuxSupervision::Ranking { positions: vec![10, 11, 12], targets, vocab };
    check_gradients(&mut model, &[soft, ranked], &LossConfig::default());
}

#[test]
fn single_token_gives_one_row_of_logits() {
    let model = Model::<f32>::new(tiny(false), 0).unwrap();
    let out = model.forward(&[3]).unwrap();
    assert_eq!(out.logits.len(), 20);
    assert_eq!(out.interior.len(), 8);
}

#[test]
fn rejects_bad_inputs() {
    let model = Model::<f32>::new(tiny(false), 0).unwrap();
    assert!(model.forward(&[20]).is_err());
    assert!(model.forward(&[1; 17]).is_err());
    let mut g = vec![0.0; model.num_params()];
    let ex = SeqExample { tokens: vec![1, 2], targets: vec![], aux: AuxSupervision::None };
    assert!(loss_and_grad(&model, &[ex], &LossConfig::default(), 1, &mut g).is_err());
}

#[test]
fn logits_are_causal() {
    let model = Model::<f64>::new(tiny(false), 5).unwrap();
    let mut rng = rng_for(9, 0, 0);
    for _ in 0..20 {
        let a: Vec<u32> = (0..16).map(|_| rng.random_range(0..20)).collect();
        let p = rng.random_range(0..15);
        let mut b = a.clone();
        for t in b.iter_mut().skip(p + 1) {
            *t = rng.random_range(0..20);
        }
        let la = model.forward(&a).unwrap().logits;
        let lb = model.forward(&b).unwrap().logits;
        for i in 0..(p + 1) * 20 {
            assert!((la[i] - lb[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_rows_are_normalised() {
    let cfg = tiny(false);
    let model = Model::<f32>::new(cfg.clone(), 6).unwrap();
    let tokens: Vec<u32> = (0..16).map(|i| i % 20).collect();
    let trace = model.forward_batch(&tokens, 1, 16).unwrap();
    for layer in 0..cfg.layers {
        for h in 0..cfg.heads {
            let att = trace.attention(layer, 0, h, cfg.heads);
            for i in 0..16 {
                let s: f64 = att[i * 16..(i + 1) * 16].iter().map(|&x| x as f64).sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
                assert!(att[i * 16 + i + 1..(i + 1) * 16].iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn padding_does_not_change_real_positions() {
    let model = Model::<f64>::new(tiny(false), 7).unwrap();
    let a = random_example(11, 9, 20);
    let b = random_example(12, 16, 20);
    let mut g1 = vec![0.0; model.num_params()];
    let mut g2 = vec![0.0; model.num_params()];
    let cfg = LossConfig { reduction: pathstar::nnet::Reduction::Sum, ..Default::default() };
    let joint = loss_and_grad(&model, &[a.clone(), b.clone()], &cfg, 2, &mut g1).unwrap();
    let split = loss_and_grad(&model, &[a, b], &cfg, 1, &mut g2).unwrap();
    assert!((joint.loss - split.loss).abs() < 1e-10);
    for (x, y) in g1.iter().zip(&g2) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn perfect_logits_give_zero_loss() {
    let mut logits = vec![0.0f64; 10];
    logits[3] = 80.0;
    let label = one_hot(3);
    let (l, _) = next_token_loss(&logits, 10, &[&label]);
    assert!(l < 1e-12);
}

#[test]
fn smoothed_labels_under_uniform_logits_cost_ln_vocab() {
    let logits = vec![0.0f64; 12];
    let label = vec![(1, 0.25), (4, 0.25), (5, 0.25), (9, 0.25)];
    let (l, g) = next_token_loss(&logits, 12, &[&label]);
    assert!((l - (12f64).ln()).abs() < 1e-12);
    assert!((g[1] - (1.0 / 12.0 - 0.25)).abs() < 1e-12);
    assert!((g[0] - 1.0 / 12.0).abs() < 1e-12);
}

#[test]
fn source_labels_are_ignored() {
    let model = Model::<f64>::new(tiny(false), 8).unwrap();
    let ex = random_example(13, 16, 20);
    let mut other = ex.clone();
    // Tokens at supervised positions decide the loss; only positions named
    // in `targets` are scored, so adding nothing there keeps the loss.
    other.targets.retain(|r| r.pos >= 8);
    let mut g = vec![0.0; model.num_params()];
    let a = loss_and_grad(&model, &[ex], &LossConfig::default(), 1, &mut g).unwrap().loss;
    let b = loss_and_grad(&model, &[other], &LossConfig::default(), 1, &mut g).unwrap().loss;
    assert_eq!(a, b);
}

fn overfit_batch() -> Vec<SeqExample> {
    (0..4)
        .map(|s| {
            let mut e = random_example(100 + s, 12, 20);
            e.targets = e.targets.into_iter().map(|r| TargetRow { pos: r.pos, label: one_hot(r.label[0].0) }).collect();
            e
        })
        .collect()
}

#[test]
fn overfit_loss_decreases_monotonically() {
    let cfg = ModelConfig { init_std: 0.02, ..tiny(false) };
    let mut tr = Trainer::new(Model::<f32>::new(cfg, 3).unwrap(), AdamConfig::default());
    let batch = overfit_batch();
    let mut prev = f64::INFINITY;
    for _ in 0..50 {
        let m = tr.train_step(&batch, 3e-3, &LossConfig::default(), 4).unwrap();
        assert!(m.grad_norm.is_finite());
        assert!(m.loss < prev, "loss rose from {prev} to {}", m.loss);
        prev = m.loss;
    }
}

#[test]
fn identical_steps_give_identical_parameters() {
    let batch = overfit_batch();
    let run = || {
        let mut tr = Trainer::new(Model::<f32>::new(tiny(false), 4).unwrap(), AdamConfig::default());
        for _ in 0..3 {
            tr.train_step(&batch, 1e-3, &LossConfig::default(), 2).unwrap();
        }
        tr.model.params
    };
    assert_eq!(run(), run());
}

#[test]
fn disabled_aux_loss_matches_baseline_bit_for_bit() {
    let batch = overfit_batch();
    let base_cfg = ModelConfig { layers: 3, ..tiny(false) };
    let aux_cfg = ModelConfig { aux_head: true, ..base_cfg.clone() };
    let mut base = Trainer::new(Model::<f32>::new(base_cfg, 21).unwrap(), AdamConfig::default());
    let mut aux = Trainer::new(Model::<f32>::new(aux_cfg, 21).unwrap(), AdamConfig::default());
    let loss = LossConfig { aux_weight: 0.0, ..Default::default() };
    for _ in 0..5 {
        base.train_step(&batch, 1e-3, &loss, 4).unwrap();
        aux.train_step(&batch, 1e-3, &loss, 4).unwrap();
    }
    let n = base.model.num_params();
    assert_eq!(&aux.model.params[..n], &base.model.params[..]);
    let tokens = &batch[0].tokens;
    assert_eq!(aux.model.forward(tokens).unwrap().logits, base.model.forward(tokens).unwrap().logits);
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let mut model = Model::<f32>::new(tiny(false), 4).unwrap();
    model.params[0] = f32::NAN;
    let mut tr = Trainer::new(model, AdamConfig::default());
    let batch = vec![SeqExample { tokens: vec![0, 1, 2], targets: vec![TargetRow { pos: 2, label: one_hot(3) }], aux: AuxSupervision::None }];
    let before = tr.model.params.clone();
    assert!(tr.train_step(&batch, 1e-3, &LossConfig::default(), 1).is_err());
    assert_eq!(tr.step, 0);
    assert_eq!(tr.model.params[1..], before[1..]);
}
