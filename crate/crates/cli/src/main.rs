//! `pathstar`: generate datasets, train, evaluate, audit and report.
//!
//! Exit codes: 0 success, 1 invalid input or I/O failure, 2 audit failure.

mod audit;
mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pathstar::evaluator::{aggregate, generative_eval, teacher_forced_eval, write_csv, write_json, SummaryRow};
use pathstar::nnet::Checkpoint;
use pathstar::trainer::{
    dataset_record, load_records, run_experiment, validation_set, EvalPoint, ExperimentSpec, RunOptions, RunRecord,
};
use serde_json::json;

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "pathstar", version, about = "Path-star graph task experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML with dotted sections). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds; replaces `train.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Overrides such as `graph.d=3` or `train.lr=1e-3`; they win over the file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a JSONL dataset of tokenized examples.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of records.
        #[arg(short, long)]
        n: u64,
        /// First record index; lets an interrupted run continue.
        #[arg(long, default_value_t = 0)]
        start: u64,
        /// Append to an existing file instead of truncating it.
        #[arg(long)]
        append: bool,
        /// Output JSONL file; `<out>.manifest.json` is written beside it.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train every seed of a config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; each seed writes under `seed-<n>/`.
        #[arg(short, long)]
        out: PathBuf,
        /// Continue each seed from its latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop each seed after this many optimiser steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Score a checkpoint on freshly sampled examples.
    Eval {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config overrides on top of the one stored in the checkpoint.
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of examples (defaults to `eval.valid_size`).
        #[arg(short, long)]
        n: Option<usize>,
        /// Sampling round; training-time validation uses rounds 0, 1, ...
        #[arg(long, default_value_t = 1_000_000)]
        round: u64,
        /// Teacher-forced scoring only.
        #[arg(long)]
        no_generative: bool,
        /// Write the report as JSON here (with a manifest beside it).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Check structural, oracle, ordering, sampler and gradient properties.
    Audit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Audit this JSONL dataset instead of a generated stream.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Generated examples to check.
        #[arg(short, long, default_value_t = 10_000)]
        n: u64,
        /// Skip the finite-difference check on a tiny model.
        #[arg(long)]
        skip_gradients: bool,
        /// Write the property report as JSON here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Aggregate run directories into SR/ABB tables.
    Report {
        /// Run directories written by `train`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the table as CSV here; without any output it goes to stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the table as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self { code: 1, err: e.into() }
    }
}

fn load_spec(cfg: &ConfigArgs, base: Option<String>) -> Result<ExperimentSpec> {
    let text = match (&cfg.config, base) {
        (Some(p), _) => fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?,
        (None, Some(b)) => b,
        (None, None) => String::new(),
    };
    let mut spec = ExperimentSpec::from_toml_with_overrides(&text, &cfg.overrides)?;
    if let Some(seeds) = &cfg.seeds {
        if seeds.is_empty() {
            bail!("--seeds needs at least one seed");
        }
        spec.train.seeds = seeds.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn parent(path: &Path) -> PathBuf {
    path.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn create(path: &Path, append: bool) -> Result<BufWriter<File>> {
    fs::create_dir_all(parent(path)).with_context(|| format!("cannot create {}", parent(path).display()))?;
    let f = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("cannot open {} for writing", path.display()))?;
    Ok(BufWriter::new(f))
}

fn gen(cfg: &ConfigArgs, n: u64, start: u64, append: bool, out: &Path) -> Result<()> {
    let spec = load_spec(cfg, None)?;
    let seed = spec.train.seeds[0];
    let mut w = create(out, append)?;
    for i in start..start + n {
        serde_json::to_writer(&mut w, &dataset_record(&spec, seed, i))?;
        w.write_all(b"\n")?;
    }
    w.flush().with_context(|| format!("cannot write {}", out.display()))?;
    drop(w);
    let mut m = Manifest::new("gen", Some(spec.to_toml()), vec![seed], json!({ "n": n, "start": start, "append": append }));
    m.add_files(&parent(out), &[out.to_path_buf()])?;
    m.write(&sidecar(out))?;
    eprintln!("wrote {n} records to {}", out.display());
    Ok(())
}

fn train(cfg: &ConfigArgs, out: &Path, resume: bool, max_steps: Option<u64>) -> Result<()> {
    pathstar::tune_allocator();
    let spec = load_spec(cfg, None)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let log = |seed: u64, e: &EvalPoint| {
        let gen = e.generative.as_ref().map_or(String::new(), |g| format!(" gen seq {:.4}", g.arm_sequence_accuracy));
        eprintln!(
            "seed {seed} samples {} loss {:.4} tf seq {:.4}{gen} ({:.0}s)",
            e.samples, e.train_loss, e.teacher_forced.arm_sequence_accuracy, e.elapsed_secs
        );
    };
    let opts = RunOptions { out_dir: Some(out.to_path_buf()), resume, max_steps, on_eval: Some(&log) };
    let records = run_experiment(&spec, &opts)?;
    let manifest_path = out.join("manifest.json");
    let mut m = Manifest::new(
        "train",
        Some(spec.to_toml()),
        spec.train.seeds.clone(),
        json!({ "resume": resume, "max_steps": max_steps }),
    );
    m.add_tree(out, &manifest_path)?;
    m.write(&manifest_path)?;
    for r in &records {
        let last = r.last().map_or("no evaluation".into(), |e| format!("tf seq {:.4} headline {:.4}", e.teacher_forced.arm_sequence_accuracy, e.headline()));
        println!("seed {}: {} samples, {last}", r.seed, r.samples_seen);
    }
    Ok(())
}

fn eval(checkpoint: &Path, cfg: &ConfigArgs, n: Option<usize>, round: u64, no_gen: bool, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let stored = ck
        .trainer
        .get("spec")
        .map(|v| serde_json::from_value::<ExperimentSpec>(v.clone()))
        .transpose()
        .context("checkpoint carries an unreadable config")?;
    let mut spec = load_spec(cfg, stored.map(|s| s.to_toml()))?;
    if let Some(n) = n {
        spec.eval.valid_size = n;
    }
    let (model, _) = ck.restore()?;
    if model.config.vocab_size != spec.vocabulary().size() {
        bail!("checkpoint vocabulary {} does not match the config's {}", model.config.vocab_size, spec.vocabulary().size());
    }
    let seed = spec.train.seeds[0];
    let examples = validation_set(&spec, seed, round);
    let tf = teacher_forced_eval(&model, &examples)?;
    let gen = if no_gen { None } else { Some(generative_eval(&model, &examples)?) };
    let report = json!({
        "checkpoint": checkpoint.display().to_string(),
        "step": ck.step,
        "examples": examples.len(),
        "seed": seed,
        "round": round,
        "teacher_forced": tf,
        "generative": gen,
    });
    println!(
        "teacher-forced seq {:.4} per-position {:?}",
        tf.arm_sequence_accuracy,
        tf.arm_position_accuracy.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
    if let Some(g) = &gen {
        println!("generative seq {:.4}", g.arm_sequence_accuracy);
    }
    if let Some(out) = out {
        let mut w = create(out, false)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.flush()?;
        drop(w);
        let mut m = Manifest::new("eval", Some(spec.to_toml()), vec![seed], json!({ "checkpoint": checkpoint, "round": round }));
        m.add_files(&parent(out), &[out.to_path_buf()])?;
        m.write(&sidecar(out))?;
    }
    Ok(())
}

fn audit_cmd(cfg: &ConfigArgs, dataset: Option<&Path>, n: u64, skip_gradients: bool, out: Option<&Path>) -> Result<bool, Failure> {
    let (report, spec) = match dataset {
        Some(path) => {
            let spec = cfg.config.is_some().then(|| load_spec(cfg, None)).transpose()?;
            (audit::audit_dataset(path, spec.as_ref().map(|s| s.vocabulary()))?, spec)
        }
        None => {
            let spec = load_spec(cfg, None)?;
            (audit::audit_config(&spec, spec.train.seeds[0], n, !skip_gradients), Some(spec))
        }
    };
    print!("{}", report.render());
    if let Some(out) = out {
        let mut w = create(out, false)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.flush()?;
        drop(w);
        let seeds = spec.as_ref().map_or_else(Vec::new, |s| s.train.seeds.clone());
        let mut m = Manifest::new("audit", spec.map(|s| s.to_toml()), seeds, json!({ "dataset": dataset, "n": n }));
        m.add_files(&parent(out), &[out.to_path_buf()])?;
        m.write(&sidecar(out))?;
    }
    Ok(report.passed)
}

/// Loads the records under each run directory, warning about seeds whose
/// metrics are missing.
fn collect_records(runs: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut all = Vec::new();
    for dir in runs {
        if !dir.is_dir() {
            bail!("run directory {} does not exist", dir.display());
        }
        let records = load_records(dir)?;
        let mut seed_dirs: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-")))
            .collect();
        seed_dirs.sort();
        for s in seed_dirs.iter().filter(|s| !s.join("record.json").exists()) {
            eprintln!("warning: {} has no record.json (run incomplete or metrics missing)", s.display());
        }
        for r in records {
            if r.evals.is_empty() {
                eprintln!("warning: {} seed {} has no evaluation points; skipped", dir.display(), r.seed);
            } else {
                all.push(r);
            }
        }
    }
    Ok(all)
}

pub fn summarise(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.experiment.clone(), r.d.clone(), r.m.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((exp, d, m), rs)| {
            let threshold_d = rs.iter().map(|r| r.threshold_d).min().unwrap_or(2);
            let trials: Vec<_> = rs.iter().filter_map(|r| r.scores()).collect();
            aggregate(&exp, &d, &m, threshold_d, &trials)
        })
        .collect()
}

fn report(runs: &[PathBuf], csv_out: Option<&Path>, json_out: Option<&Path>) -> Result<()> {
    let records = collect_records(runs)?;
    if records.is_empty() {
        bail!("no completed runs with metrics under the given directories");
    }
    let rows = summarise(&records);
    let seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    let mut written = Vec::new();
    if let Some(p) = csv_out {
        write_csv(&rows, create(p, false)?)?;
        written.push(p.to_path_buf());
    }
    if let Some(p) = json_out {
        let mut w = create(p, false)?;
        write_json(&rows, &mut w)?;
        w.flush()?;
        written.push(p.to_path_buf());
    }
    if written.is_empty() {
        write_csv(&rows, std::io::stdout().lock())?;
    } else {
        let base = parent(&written[0]);
        let mut m = Manifest::new("report", None, seeds, json!({ "runs": runs }));
        m.add_files(&base, &written)?;
        m.write(&sidecar(&written[0]))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { cfg, n, start, append, out } => gen(&cfg, n, start, append, &out)?,
        Command::Train { cfg, out, resume, max_steps } => train(&cfg, &out, resume, max_steps)?,
        Command::Eval { checkpoint, cfg, n, round, no_generative, out } => {
            eval(&checkpoint, &cfg, n, round, no_generative, out.as_deref())?
        }
        Command::Audit { cfg, dataset, n, skip_gradients, out } => {
            if !audit_cmd(&cfg, dataset.as_deref(), n, skip_gradients, out.as_deref())? {
                return Err(Failure { code: 2, err: anyhow::anyhow!("audit failed") });
            }
        }
        Command::Report { runs, csv, json } => report(&runs, csv.as_deref(), json.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
