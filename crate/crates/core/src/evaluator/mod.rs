//! Teacher-forced and generative scoring, reference predictors, oracles and
//! table emitters.

pub mod oracle;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::nnet::{argmax, pack, Model, ModelError, Scalar};
use crate::supervision::ScratchpadPlan;
use crate::tokenizer::{Token, TokenizedExample, Vocabulary};

pub use oracle::{
    chc_predict, enumerate_traversals, solve_path_oracle, validate_traversal, ChcUniformPredictor, OracleError,
};
pub use report::{aggregate, abb_threshold, write_csv, write_json, SummaryRow, TrialScores, SR_THRESHOLD};

/// Anything that can name its greedy next token at chosen positions.
pub trait SequenceModel {
    /// For each sequence, the argmax prediction at each requested position
    /// (the prediction for the token that follows that position).
    fn predict(&self, seqs: &[&[Token]], positions: &[Vec<usize>]) -> Result<Vec<Vec<Token>>, ModelError>;
}

const EVAL_CHUNK: usize = 64;

impl<T: Scalar> SequenceModel for Model<T> {
    fn predict(&self, seqs: &[&[Token]], positions: &[Vec<usize>]) -> Result<Vec<Vec<Token>>, ModelError> {
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(seqs.len());
        for (chunk, pos) in seqs.chunks(EVAL_CHUNK).zip(positions.chunks(EVAL_CHUNK)) {
            let (tokens, t) = pack(chunk);
            let trace = self.forward_batch(&tokens, chunk.len(), t)?;
            let rows: Vec<usize> = pos.iter().enumerate().flat_map(|(b, ps)| ps.iter().map(move |&p| b * t + p)).collect();
            let logits = self.logits(&trace, &rows);
            let mut k = 0;
            for ps in pos {
                out.push(
                    ps.iter()
                        .map(|_| {
                            let tok = argmax(&logits[k * v..(k + 1) * v]) as Token;
                            k += 1;
                            tok
                        })
                        .collect(),
                );
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    TeacherForced,
    Generative,
}

/// One scored example. The target is `#`-scratchpad (optional) then the arm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub source: Vec<Token>,
    pub target: Vec<Token>,
    pub scratchpad_len: usize,
    /// Accepted tokens at each scratchpad position when several orders are
    /// valid; `None` means the reference token only.
    pub scratchpad_valid: Option<Vec<Vec<Token>>>,
    pub num_arms: usize,
}

impl EvalExample {
    pub fn new(ex: &TokenizedExample, sp: Option<&ScratchpadPlan>, vocab: &Vocabulary, num_arms: usize) -> Self {
        let scratchpad_valid = sp.filter(|p| p.valid_targets.iter().any(|v| v.len() > 1)).map(|p| {
            p.valid_targets.iter().map(|set| set.iter().map(|&n| vocab.node(n)).collect()).collect()
        });
        Self {
            source: ex.source.clone(),
            target: ex.target.clone(),
            scratchpad_len: ex.scratchpad_len,
            scratchpad_valid,
            num_arms,
        }
    }

    pub fn tokens(&self) -> Vec<Token> {
        let mut t = self.source.clone();
        t.extend_from_slice(&self.target);
        t
    }

    /// Tokens decoding starts from (`=` and a possible `#` are forced).
    pub fn forced_prefix(&self) -> Vec<Token> {
        let mut t = self.source.clone();
        if self.scratchpad_len > 0 {
            t.push(self.target[0]);
        }
        t
    }

    fn forced_len(&self) -> usize {
        usize::from(self.scratchpad_len > 0)
    }

    /// Target tokens that must be predicted (scratchpad nodes then the arm).
    pub fn scored_target(&self) -> &[Token] {
        &self.target[self.forced_len()..]
    }

    pub fn arm(&self) -> &[Token] {
        &self.target[self.forced_len() + self.scratchpad_len..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub num_examples: usize,
    /// Accuracy at each arm position; index 0 is the start node.
    pub arm_position_accuracy: Vec<f64>,
    pub arm_sequence_accuracy: f64,
    pub scratchpad_position_accuracy: Option<Vec<f64>>,
    pub scratchpad_sequence_accuracy: Option<f64>,
    /// Mean accuracy over every scored target position.
    pub token_accuracy: f64,
}

#[derive(Default)]
struct Tally {
    arm_hits: Vec<usize>,
    arm_counts: Vec<usize>,
    arm_seq: usize,
    sp_hits: Vec<usize>,
    sp_counts: Vec<usize>,
    sp_seq: usize,
    has_sp: bool,
    tokens: usize,
    token_hits: usize,
    n: usize,
}

impl Tally {
    fn bump(hits: &mut Vec<usize>, counts: &mut Vec<usize>, i: usize, ok: bool) {
        if hits.len() <= i {
            hits.resize(i + 1, 0);
            counts.resize(i + 1, 0);
        }
        counts[i] += 1;
        hits[i] += usize::from(ok);
    }

    fn add(&mut self, sp_ok: &[bool], arm_ok: &[bool]) {
        self.n += 1;
        if !sp_ok.is_empty() {
            self.has_sp = true;
            self.sp_seq += usize::from(sp_ok.iter().all(|&b| b));
        }
        for (i, &ok) in sp_ok.iter().enumerate() {
            Self::bump(&mut self.sp_hits, &mut self.sp_counts, i, ok);
        }
        for (i, &ok) in arm_ok.iter().enumerate() {
            Self::bump(&mut self.arm_hits, &mut self.arm_counts, i, ok);
        }
        self.arm_seq += usize::from(arm_ok.iter().all(|&b| b));
        self.tokens += sp_ok.len() + arm_ok.len();
        self.token_hits += sp_ok.iter().chain(arm_ok).filter(|&&b| b).count();
    }

    fn finish(self, mode: EvalMode) -> EvalReport {
        let ratio = |h: &[usize], c: &[usize]| h.iter().zip(c).map(|(&h, &c)| h as f64 / c as f64).collect::<Vec<_>>();
        let n = self.n.max(1) as f64;
        EvalReport {
            mode,
            num_examples: self.n,
            arm_position_accuracy: ratio(&self.arm_hits, &self.arm_counts),
            arm_sequence_accuracy: self.arm_seq as f64 / n,
            scratchpad_position_accuracy: self.has_sp.then(|| ratio(&self.sp_hits, &self.sp_counts)),
            scratchpad_sequence_accuracy: self.has_sp.then(|| self.sp_seq as f64 / n),
            token_accuracy: self.token_hits as f64 / self.tokens.max(1) as f64,
        }
    }
}

/// Per-position correctness of scratchpad predictions. Multi-valued
/// scratchpads accept any not-yet-emitted member.
fn score_scratchpad(ex: &EvalExample, predicted: &[Token], teacher_forced: bool) -> Vec<bool> {
    let reference = &ex.scored_target()[..ex.scratchpad_len];
    match &ex.scratchpad_valid {
        None => predicted.iter().zip(reference).map(|(p, r)| p == r).collect(),
        Some(valid) if teacher_forced => predicted.iter().zip(valid).map(|(p, set)| set.contains(p)).collect(),
        Some(valid) => {
            let mut remaining = valid[0].clone();
            predicted
                .iter()
                .map(|p| match remaining.iter().position(|x| x == p) {
                    Some(i) => {
                        remaining.swap_remove(i);
                        true
                    }
                    None => false,
                })
                .collect()
        }
    }
}

/// Scores ground-truth-conditioned predictions over the target segment.
pub fn teacher_forced_eval<M: SequenceModel + ?Sized>(model: &M, examples: &[EvalExample]) -> Result<EvalReport, ModelError> {
    let seqs: Vec<Vec<Token>> = examples.iter().map(EvalExample::tokens).collect();
    let inputs: Vec<&[Token]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
    let positions: Vec<Vec<usize>> = examples
        .iter()
        .map(|e| {
            let first = e.source.len() + e.forced_len() - 1;
            (first..first + e.scored_target().len()).collect()
        })
        .collect();
    let preds = model.predict(&inputs, &positions)?;
    let mut tally = Tally::default();
    for (e, p) in examples.iter().zip(&preds) {
        let (sp, arm) = p.split_at(e.scratchpad_len);
        let sp_ok = score_scratchpad(e, sp, true);
        let arm_ok: Vec<bool> = arm.iter().zip(e.arm()).map(|(a, b)| a == b).collect();
        tally.add(&sp_ok, &arm_ok);
    }
    Ok(tally.finish(EvalMode::TeacherForced))
}

/// Greedy rollout of `steps` tokens for each prefix, batched.
pub fn rollout<M: SequenceModel + ?Sized>(model: &M, prefixes: &[Vec<Token>], steps: &[usize]) -> Result<Vec<Vec<Token>>, ModelError> {
    let mut seqs: Vec<Vec<Token>> = prefixes.to_vec();
    let max_steps = steps.iter().copied().max().unwrap_or(0);
    for k in 0..max_steps {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| steps[i] > k).collect();
        let views: Vec<&[Token]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let pos: Vec<Vec<usize>> = views.iter().map(|s| vec![s.len() - 1]).collect();
        let next = model.predict(&views, &pos)?;
        for (&i, p) in active.iter().zip(next) {
            seqs[i].push(p[0]);
        }
    }
    Ok(seqs.into_iter().zip(prefixes).map(|(s, p)| s[p.len()..].to_vec()).collect())
}

/// Argmax decoding from `prefix` for `target_len + max_extra` tokens. There
/// is no end-of-sequence token, so decoding always runs to the limit.
pub fn greedy_generate<M: SequenceModel + ?Sized>(
    model: &M,
    prefix: &[Token],
    target_len: usize,
    max_extra: usize,
) -> Result<Vec<Token>, ModelError> {
    Ok(rollout(model, &[prefix.to_vec()], &[target_len + max_extra])?.remove(0))
}

/// Scores free-running greedy decoding. Only the first `|target|` generated
/// tokens are compared, so decoding stops there.
pub fn generative_eval<M: SequenceModel + ?Sized>(model: &M, examples: &[EvalExample]) -> Result<EvalReport, ModelError> {
    let prefixes: Vec<Vec<Token>> = examples.iter().map(EvalExample::forced_prefix).collect();
    let steps: Vec<usize> = examples.iter().map(|e| e.scored_target().len()).collect();
    let generated = rollout(model, &prefixes, &steps)?;
    let mut tally = Tally::default();
    for (e, g) in examples.iter().zip(&generated) {
        let (sp, arm) = g.split_at(e.scratchpad_len);
        let sp_ok = score_scratchpad(e, sp, false);
        let arm_ok: Vec<bool> = arm.iter().zip(e.arm()).map(|(a, b)| a == b).collect();
        tally.add(&sp_ok, &arm_ok);
    }
    Ok(tally.finish(EvalMode::Generative))
}
