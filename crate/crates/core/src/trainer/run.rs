//! The training loop: batches in index order, periodic validation,
//! checkpoints and resumption.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::{make_batch, validation_set, Batch};
use super::spec::{ExperimentSpec, EPOCH_SAMPLES};
use crate::evaluator::{generative_eval, teacher_forced_eval, EvalReport, TrialScores};
use crate::nnet::{Checkpoint, CheckpointError, Model, ModelError, Trainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("non-finite loss {loss} at step {step}; last checkpoint: {last_checkpoint:?}")]
    NonFinite { step: u64, loss: f64, last_checkpoint: Option<PathBuf> },
    #[error("checkpoint does not match this run: {0}")]
    Mismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Metrics at one validation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub samples: u64,
    pub epoch: f64,
    pub step: u64,
    /// Mean training loss since the previous validation point.
    pub train_loss: f64,
    pub train_token_accuracy: f64,
    pub grad_norm: f64,
    pub teacher_forced: EvalReport,
    pub generative: Option<EvalReport>,
    pub elapsed_secs: f64,
}

impl EvalPoint {
    /// Sequence accuracy used for convergence and early stopping: generative
    /// when available.
    pub fn headline(&self) -> f64 {
        self.generative.as_ref().unwrap_or(&self.teacher_forced).arm_sequence_accuracy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub seed: u64,
    #[serde(rename = "D")]
    pub d: String,
    #[serde(rename = "M")]
    pub m: String,
    /// Smallest degree trained on; sets the above-baseline threshold.
    pub threshold_d: usize,
    pub evals: Vec<EvalPoint>,
    /// Samples seen when sequence accuracy first exceeded 95%.
    pub converged_at: Option<u64>,
    pub samples_seen: u64,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn last(&self) -> Option<&EvalPoint> {
        self.evals.last()
    }

    pub fn scores(&self) -> Option<TrialScores> {
        let e = self.last()?;
        Some(TrialScores {
            seed: self.seed,
            teacher_forced: e.teacher_forced.arm_sequence_accuracy,
            generative: e.generative.as_ref().map(|g| g.arm_sequence_accuracy),
        })
    }
}

/// Where a run writes and what it resumes from.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Per-seed files go under `<out_dir>/seed-<seed>/`.
    pub out_dir: Option<PathBuf>,
    /// Resume each seed from its latest checkpoint when one exists.
    pub resume: bool,
    /// Stop after this many optimiser steps in total (for tests and
    /// interrupted runs); `None` runs the full sample budget.
    pub max_steps: Option<u64>,
    pub on_eval: Option<&'a (dyn Fn(u64, &EvalPoint) + Sync)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    seed: u64,
    next_batch: u64,
    samples_seen: u64,
    spec: ExperimentSpec,
    evals: Vec<EvalPoint>,
    window: Window,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
struct Window {
    loss_sum: f64,
    steps: u64,
    correct: u64,
    targets: u64,
    grad_norm: f64,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn checkpoint_dir(out: &Path, seed: u64) -> PathBuf {
    seed_dir(out, seed).join("checkpoints")
}

/// Checkpoint files of a seed directory, oldest first.
pub fn list_checkpoints(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".json")))
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

/// Streams batches `start..` in index order, built by `workers` threads
/// (each with its own bounded queue) or inline when `workers == 0`.
struct BatchFeed<'s> {
    spec: &'s ExperimentSpec,
    seed: u64,
    next: u64,
    queues: Vec<Receiver<Batch>>,
}

impl BatchFeed<'_> {
    fn next_batch(&mut self) -> Batch {
        let b = if self.queues.is_empty() {
            make_batch(self.spec, self.seed, self.next)
        } else {
            let w = (self.next % self.queues.len() as u64) as usize;
            self.queues[w].recv().expect("batch worker stopped")
        };
        debug_assert_eq!(b.index, self.next);
        self.next += 1;
        b
    }
}

fn evaluate(spec: &ExperimentSpec, model: &Model<f32>, seed: u64, round: u64) -> Result<(EvalReport, Option<EvalReport>), ModelError> {
    let examples = validation_set(spec, seed, round);
    let tf = teacher_forced_eval(model, &examples)?;
    let gen = if spec.eval.generative { Some(generative_eval(model, &examples)?) } else { None };
    Ok((tf, gen))
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let line = serde_json::to_string(value).expect("metrics serialise");
    writeln!(f, "{line}").map_err(io_err(path))
}

/// Trains one seed to completion (or early stop / step limit).
pub fn run_seed(spec: &ExperimentSpec, seed: u64, opts: &RunOptions) -> Result<RunRecord, TrainError> {
    let started = Instant::now();
    let batch = spec.train.batch as u64;
    let total_batches = spec.train.samples.div_ceil(batch);
    let out = opts.out_dir.as_ref().map(|o| seed_dir(o, seed));
    if let Some(dir) = &out {
        fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(dir))?;
        fs::write(dir.join("config.toml"), spec.to_toml()).map_err(io_err(dir))?;
    }

    let mut state = TrainerState { seed, next_batch: 0, samples_seen: 0, spec: spec.clone(), evals: Vec::new(), window: Window::default() };
    let mut trainer = Trainer::new(Model::<f32>::new(spec.model_config(), seed)?, spec.adam());
    let mut last_checkpoint = None;
    if let (true, Some(o)) = (opts.resume, &opts.out_dir) {
        if let Some(path) = list_checkpoints(&checkpoint_dir(o, seed)).pop() {
            let ck = Checkpoint::load(&path)?;
            let restored: TrainerState =
                serde_json::from_value(ck.trainer.clone()).map_err(|e| TrainError::Mismatch(e.to_string()))?;
            if restored.spec != *spec || restored.seed != seed {
                return Err(TrainError::Mismatch(format!("{} was written for a different config or seed", path.display())));
            }
            let (model, opt) = ck.restore()?;
            trainer = Trainer::from_parts(model, opt, ck.step);
            state = restored;
            last_checkpoint = Some(path);
        }
    }
    trainer.grad_clip = (spec.train.grad_clip > 0.0).then_some(spec.train.grad_clip);
    let metrics_path = out.as_ref().map(|d| d.join("metrics.jsonl"));
    if let Some(p) = &metrics_path {
        // Drop points logged after the checkpoint being resumed.
        let _ = fs::remove_file(p);
        for e in &state.evals {
            append_jsonl(p, e)?;
        }
    }

    let loss_cfg = spec.loss();
    let every = spec.eval.every;
    let ck_every = spec.train.checkpoint_every;
    let mut stopped_early = false;

    let save = |trainer: &Trainer<f32>, state: &TrainerState| -> Result<Option<PathBuf>, TrainError> {
        let Some(o) = &opts.out_dir else { return Ok(None) };
        let dir = checkpoint_dir(o, seed);
        let path = dir.join(format!("ckpt-{:012}.json", state.samples_seen));
        let value = serde_json::to_value(state).expect("state serialises");
        Checkpoint::capture(&trainer.model, &trainer.opt, trainer.step, value).save(&path)?;
        let all = list_checkpoints(&dir);
        let keep = spec.train.keep_checkpoints.max(1);
        for old in &all[..all.len().saturating_sub(keep)] {
            let _ = fs::remove_file(old);
        }
        Ok(Some(path))
    };

    std::thread::scope(|scope| -> Result<(), TrainError> {
        let workers = spec.train.workers;
        let mut queues = Vec::with_capacity(workers);
        for w in 0..workers as u64 {
            let (tx, rx) = sync_channel::<Batch>(2);
            let first = state.next_batch;
            scope.spawn(move || {
                let mut i = first + w;
                while i < total_batches {
                    if tx.send(make_batch(spec, seed, i)).is_err() {
                        break;
                    }
                    i += workers as u64;
                }
            });
            queues.push(rx);
        }
        let mut feed = BatchFeed { spec, seed, next: state.next_batch, queues };

        let mut steps_here = 0u64;
        while state.next_batch < total_batches {
            if opts.max_steps.is_some_and(|m| steps_here >= m) {
                break;
            }
            let b = feed.next_batch();
            let lr = spec.lr_at(trainer.step);
            let m = match trainer.train_step(&b.into_seqs(), lr, &loss_cfg, spec.train.micro_batch) {
                Ok(m) => m,
                Err(ModelError::NonFiniteLoss { loss, step }) => {
                    return Err(TrainError::NonFinite { step, loss, last_checkpoint: last_checkpoint.clone() })
                }
                Err(e) => return Err(e.into()),
            };
            steps_here += 1;
            let before = state.samples_seen;
            state.next_batch += 1;
            state.samples_seen = (state.next_batch * batch).min(spec.train.samples);
            let w = &mut state.window;
            w.loss_sum += m.loss;
            w.steps += 1;
            w.correct += m.correct as u64;
            w.targets += m.target_positions as u64;
            w.grad_norm = m.grad_norm;

            let done = state.next_batch == total_batches;
            if before / every != state.samples_seen / every || done {
                let round = state.evals.len() as u64;
                let (tf, gen) = evaluate(spec, &trainer.model, seed, round)?;
                let w = std::mem::take(&mut state.window);
                let point = EvalPoint {
                    samples: state.samples_seen,
                    epoch: state.samples_seen as f64 / EPOCH_SAMPLES as f64,
                    step: trainer.step,
                    train_loss: w.loss_sum / w.steps.max(1) as f64,
                    train_token_accuracy: w.correct as f64 / w.targets.max(1) as f64,
                    grad_norm: w.grad_norm,
                    teacher_forced: tf,
                    generative: gen,
                    elapsed_secs: started.elapsed().as_secs_f64(),
                };
                if let Some(p) = &metrics_path {
                    append_jsonl(p, &point)?;
                }
                if let Some(cb) = opts.on_eval {
                    cb(seed, &point);
                }
                let stop = spec.train.early_stop > 0.0 && point.headline() >= spec.train.early_stop;
                state.evals.push(point);
                if stop {
                    stopped_early = true;
                    last_checkpoint = save(&trainer, &state)?.or(last_checkpoint.take());
                    break;
                }
            }
            let ck_due = ck_every > 0 && before / ck_every != state.samples_seen / ck_every;
            if ck_due || done {
                last_checkpoint = save(&trainer, &state)?.or(last_checkpoint.take());
            }
        }
        // Unblock any worker still waiting on a full queue.
        drop(feed);
        Ok(())
    })?;

    let converged_at = state.evals.iter().find(|e| e.headline() > 0.95).map(|e| e.samples);
    let record = RunRecord {
        experiment: spec.name.clone(),
        seed,
        d: spec.graph.d.label(),
        m: spec.graph.m.label(),
        threshold_d: spec.graph.d.min,
        evals: state.evals,
        converged_at,
        samples_seen: state.samples_seen,
        stopped_early,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &out {
        let path = dir.join("record.json");
        let f = File::create(&path).map_err(io_err(&path))?;
        serde_json::to_writer_pretty(f, &record).expect("record serialises");
    }
    Ok(record)
}

/// Runs every seed of the spec, sequentially or on separate threads.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<Vec<RunRecord>, TrainError> {
    if !spec.train.parallel_seeds {
        return spec.train.seeds.iter().map(|&s| run_seed(spec, s, opts)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = spec.train.seeds.iter().map(|&s| scope.spawn(move || run_seed(spec, s, opts))).collect();
        handles.into_iter().map(|h| h.join().expect("seed thread panicked")).collect()
    })
}

/// Reads the records under an output directory, in seed order.
pub fn load_records(out: &Path) -> Result<Vec<RunRecord>, TrainError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .map_err(io_err(out))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("record.json").exists())
        .collect();
    dirs.sort();
    let mut records: Vec<RunRecord> = dirs
        .iter()
        .map(|d| {
            let p = d.join("record.json");
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            serde_json::from_str(&text).map_err(|e| TrainError::Mismatch(format!("{}: {e}", p.display())))
        })
        .collect::<Result<_, _>>()?;
    records.sort_by_key(|r| r.seed);
    Ok(records)
}
