//! Decoder-only transformer, losses, optimiser and checkpoints.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod scalar;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use model::{argmax, pack, ForwardTrace, Model, ModelConfig, ModelError, ParamTensor, Trace};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;

use crate::supervision::{ritf_loss, AuxTargets};
use crate::tokenizer::{Token, Vocabulary};

/// Sparse label distribution over tokens; weights sum to one.
pub type SoftLabel = Vec<(Token, f64)>;

pub fn one_hot(token: Token) -> SoftLabel {
    vec![(token, 1.0)]
}

/// Supervision at one position: the logits at `pos` are scored against
/// `label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub pos: usize,
    pub label: SoftLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AuxSupervision {
    None,
    /// Soft cross-entropy on the auxiliary head.
    Soft(Vec<TargetRow>),
    /// Pairwise hinge ranking; `positions[i]` holds future-step `i`.
    Ranking { positions: Vec<usize>, targets: AuxTargets, vocab: Vocabulary },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqExample {
    pub tokens: Vec<Token>,
    pub targets: Vec<TargetRow>,
    pub aux: AuxSupervision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub reduction: Reduction,
    pub aux_weight: f64,
    pub hinge: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { reduction: Reduction::Mean, aux_weight: 1.0, hinge: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub main_loss: f64,
    pub aux_loss: f64,
    pub grad_norm: f64,
    pub target_positions: usize,
    /// Target positions whose argmax hit a token with positive label weight.
    pub correct: usize,
}

/// Soft-label cross-entropy summed over rows. Returns the loss and
/// `d loss / d logits` for the same rows.
pub fn next_token_loss<T: Scalar>(logits: &[T], vocab: usize, labels: &[&SoftLabel]) -> (f64, Vec<T>) {
    assert_eq!(logits.len(), labels.len() * vocab);
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0;
    for (r, label) in labels.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut z = T::zero();
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - mx).exp();
            z += *gi;
        }
        let log_z = z.ln() + mx;
        let mass: f64 = label.iter().map(|&(_, w)| w).sum();
        let inv = T::one() / z;
        let mass_t = T::from_f64_lossy(mass);
        for gi in g.iter_mut() {
            *gi = *gi * inv * mass_t;
        }
        for &(tok, w) in label.iter() {
            let w_t = T::from_f64_lossy(w);
            total += w * (log_z - row[tok as usize]).to_f64().unwrap();
            g[tok as usize] -= w_t;
        }
    }
    (total, grad)
}

struct BatchNorms {
    main: f64,
    aux: f64,
    ranking: f64,
}

fn norms(examples: &[SeqExample], reduction: Reduction) -> BatchNorms {
    let mean = |n: usize| if reduction == Reduction::Mean { n.max(1) as f64 } else { 1.0 };
    let main = examples.iter().map(|e| e.targets.len()).sum();
    let aux = examples
        .iter()
        .map(|e| match &e.aux {
            AuxSupervision::Soft(rows) => rows.len(),
            _ => 0,
        })
        .sum();
    let ranked = examples.iter().filter(|e| matches!(e.aux, AuxSupervision::Ranking { .. })).count();
    BatchNorms { main: mean(main), aux: mean(aux), ranking: mean(ranked) }
}

struct Partial {
    main: f64,
    aux: f64,
    correct: usize,
}

/// Forward + backward over one padded group of examples, accumulating into
/// `grads` with the batch-level normalisers.
fn accumulate<T: Scalar>(
    model: &Model<T>,
    group: &[SeqExample],
    cfg: &LossConfig,
    nm: &BatchNorms,
    grads: &mut [T],
) -> Result<Partial, ModelError> {
    let v = model.config.vocab_size;
    let seqs: Vec<&[Token]> = group.iter().map(|e| e.tokens.as_slice()).collect();
    let (tokens, t) = pack(&seqs);
    for e in group {
        for r in &e.targets {
            if r.pos >= e.tokens.len() {
                return Err(ModelError::PositionOutOfRange { pos: r.pos, len: e.tokens.len() });
            }
        }
    }
    let trace = model.forward_batch(&tokens, group.len(), t)?;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (b, e) in group.iter().enumerate() {
        for r in &e.targets {
            rows.push(b * t + r.pos);
            labels.push(&r.label);
        }
    }
    let logits = model.logits(&trace, &rows);
    let (main, mut d_main) = next_token_loss(&logits, v, &labels);
    let mut correct = 0;
    for (i, label) in labels.iter().enumerate() {
        let top = argmax(&logits[i * v..(i + 1) * v]) as Token;
        if label.iter().any(|&(tok, w)| tok == top && w > 0.0) {
            correct += 1;
        }
    }
    let s_main = T::from_f64_lossy(1.0 / nm.main);
    for g in d_main.iter_mut() {
        *g *= s_main;
    }

    let mut aux_rows = Vec::new();
    let mut aux_grad: Vec<T> = Vec::new();
    let mut aux_loss = 0.0;
    let w_aux = cfg.aux_weight;
    let soft: Vec<(usize, &TargetRow)> = group
        .iter()
        .enumerate()
        .flat_map(|(b, e)| match &e.aux {
            AuxSupervision::Soft(rs) => rs.iter().map(|r| (b, r)).collect::<Vec<_>>(),
            _ => Vec::new(),
        })
        .collect();
    let has_ranking = group.iter().any(|e| matches!(e.aux, AuxSupervision::Ranking { .. }));
    if (!soft.is_empty() || has_ranking) && model.config.aux_head && w_aux != 0.0 {
        if !soft.is_empty() {
            let rows: Vec<usize> = soft.iter().map(|&(b, r)| b * t + r.pos).collect();
            let labels: Vec<&SoftLabel> = soft.iter().map(|(_, r)| &r.label).collect();
            let scores = model.aux_scores(&trace, &rows);
            let (l, mut d) = next_token_loss(&scores, v, &labels);
            aux_loss += l / nm.aux;
            let s = T::from_f64_lossy(w_aux / nm.aux);
            for g in d.iter_mut() {
                *g *= s;
            }
            aux_rows.extend(rows);
            aux_grad.extend(d);
        }
        for (b, e) in group.iter().enumerate() {
            if let AuxSupervision::Ranking { positions, targets, vocab } = &e.aux {
                let rows: Vec<usize> = positions.iter().map(|&p| b * t + p).collect();
                let scores = model.aux_scores(&trace, &rows);
                let per_row: Vec<Vec<T>> = scores.chunks(v).map(<[T]>::to_vec).collect();
                let (l, d) = ritf_loss(&per_row, targets, vocab, T::from_f64_lossy(cfg.hinge))
                    .map_err(|e| ModelError::Config(e.to_string()))?;
                aux_loss += l.to_f64().unwrap() / nm.ranking;
                let s = T::from_f64_lossy(w_aux / nm.ranking);
                aux_rows.extend(rows);
                aux_grad.extend(d.into_iter().flatten().map(|g| g * s));
            }
        }
    }

    let aux = (!aux_rows.is_empty()).then_some((aux_rows.as_slice(), aux_grad.as_slice()));
    model.backward(&trace, &rows, &d_main, aux, grads);
    Ok(Partial { main: main / nm.main, aux: aux_loss, correct })
}

/// Loss and gradient over a whole batch, processed in groups of at most
/// `micro_batch` sequences. `grads` is overwritten.
pub fn loss_and_grad<T: Scalar>(
    model: &Model<T>,
    examples: &[SeqExample],
    cfg: &LossConfig,
    micro_batch: usize,
    grads: &mut [T],
) -> Result<StepMetrics, ModelError> {
    let total_targets: usize = examples.iter().map(|e| e.targets.len()).sum();
    if total_targets == 0 {
        return Err(ModelError::EmptyLossMask);
    }
    grads.iter_mut().for_each(|g| *g = T::zero());
    let nm = norms(examples, cfg.reduction);
    let mut m = StepMetrics { target_positions: total_targets, ..Default::default() };
    for group in examples.chunks(micro_batch.max(1)) {
        let p = accumulate(model, group, cfg, &nm, grads)?;
        m.main_loss += p.main;
        m.aux_loss += p.aux;
        m.correct += p.correct;
    }
    m.loss = m.main_loss + cfg.aux_weight * m.aux_loss;
    m.grad_norm = grads.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
    Ok(m)
}

/// Optimiser state plus a reusable gradient buffer.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub opt: Adam<T>,
    pub step: u64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    grads: Vec<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, adam: AdamConfig) -> Self {
        let n = model.num_params();
        Self { model, opt: Adam::new(n, adam), step: 0, grad_clip: None, grads: vec![T::zero(); n] }
    }

    pub fn from_parts(model: Model<T>, opt: Adam<T>, step: u64) -> Self {
        let n = model.num_params();
        Self { model, opt, step, grad_clip: None, grads: vec![T::zero(); n] }
    }

    /// One optimiser update. Parameters are left untouched when the loss or
    /// gradient is not finite.
    pub fn train_step(
        &mut self,
        batch: &[SeqExample],
        lr: f64,
        cfg: &LossConfig,
        micro_batch: usize,
    ) -> Result<StepMetrics, ModelError> {
        let m = loss_and_grad(&self.model, batch, cfg, micro_batch, &mut self.grads)?;
        if !m.loss.is_finite() || !m.grad_norm.is_finite() {
            return Err(ModelError::NonFiniteLoss { loss: m.loss, step: self.step });
        }
        if let Some(max) = self.grad_clip {
            if m.grad_norm > max {
                let s = T::from_f64_lossy(max / m.grad_norm);
                self.grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        self.opt.step(&mut self.model.params, &self.grads, lr);
        self.step += 1;
        Ok(m)
    }
}
