//! Python bindings: configs, data generation, parsing, the path oracle,
//! models, training and evaluation.

use std::path::PathBuf;

use num_bigint::BigUint;
use pathstar::evaluator::{self, generative_eval, greedy_generate, teacher_forced_eval, SequenceModel, TrialScores};
use pathstar::graph;
use pathstar::nnet::{self, Checkpoint};
use pathstar::tokenizer::{parse_example, Token, Vocabulary};
use pathstar::trainer::{self, dataset_record, validation_set, ExperimentSpec, RunOptions};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Experiment configuration parsed from TOML plus dotted `key=value`
/// overrides.
#[pyclass(name = "Spec", module = "pathstar", from_py_object)]
#[derive(Clone)]
struct Spec {
    inner: ExperimentSpec,
}

#[pymethods]
impl Spec {
    #[new]
    #[pyo3(signature = (toml = "", overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        let inner = ExperimentSpec::from_toml_with_overrides(toml, &overrides).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocabulary().size()
    }

    #[getter]
    fn universe(&self) -> usize {
        self.inner.universe()
    }

    #[getter]
    fn max_input_len(&self) -> usize {
        self.inner.max_input_len()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.train.seeds.clone()
    }

    fn __repr__(&self) -> String {
        format!("Spec(name={:?}, seeds={:?})", self.inner.name, self.inner.train.seeds)
    }
}

/// A float32 transformer, freshly initialised or restored from a checkpoint.
#[pyclass(name = "Model", module = "pathstar")]
struct Model {
    inner: nnet::Model<f32>,
    spec: Option<ExperimentSpec>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (spec, seed = 0))]
    fn new(spec: &Spec, seed: u64) -> PyResult<Self> {
        let inner = nnet::Model::new(spec.inner.model_config(), seed).map_err(value_err)?;
        Ok(Self { inner, spec: Some(spec.inner.clone()) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let (inner, _) = ck.restore().map_err(value_err)?;
        let spec = ck.trainer.get("spec").and_then(|v| serde_json::from_value(v.clone()).ok());
        Ok(Self { inner, spec })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config.vocab_size
    }

    #[getter]
    fn spec(&self) -> Option<Spec> {
        self.spec.clone().map(|inner| Spec { inner })
    }

    /// Argmax next-token prediction at every position of `tokens`.
    fn predict(&self, py: Python<'_>, tokens: Vec<Token>) -> PyResult<Vec<Token>> {
        let positions = vec![(0..tokens.len()).collect::<Vec<_>>()];
        let mut out = py.detach(|| self.inner.predict(&[&tokens], &positions)).map_err(value_err)?;
        Ok(out.remove(0))
    }

    /// Greedy continuation of `prefix` for `steps` tokens.
    fn generate(&self, py: Python<'_>, prefix: Vec<Token>, steps: usize) -> PyResult<Vec<Token>> {
        py.detach(|| greedy_generate(&self.inner, &prefix, steps, 0)).map_err(value_err)
    }

    /// Teacher-forced and (optionally) generative accuracy on a validation
    /// round drawn from `spec`, defaulting to the checkpoint's own config.
    #[pyo3(signature = (spec = None, seed = None, round = 1_000_000, n = None, generative = true))]
    fn evaluate(
        &self,
        py: Python<'_>,
        spec: Option<&Spec>,
        seed: Option<u64>,
        round: u64,
        n: Option<usize>,
        generative: bool,
    ) -> PyResult<Py<PyAny>> {
        let mut spec = match (spec, &self.spec) {
            (Some(s), _) => s.inner.clone(),
            (None, Some(s)) => s.clone(),
            (None, None) => return Err(PyValueError::new_err("model has no config; pass spec")),
        };
        if let Some(n) = n {
            spec.eval.valid_size = n;
        }
        if spec.vocabulary().size() != self.inner.config.vocab_size {
            return Err(PyValueError::new_err("config vocabulary does not match the model"));
        }
        let seed = seed.unwrap_or(spec.train.seeds[0]);
        let (tf, gen) = py
            .detach(|| {
                let examples = validation_set(&spec, seed, round);
                let tf = teacher_forced_eval(&self.inner, &examples)?;
                let gen = if generative { Some(generative_eval(&self.inner, &examples)?) } else { None };
                Ok::<_, nnet::ModelError>((tf, gen))
            })
            .map_err(value_err)?;
        to_py(py, &serde_json::json!({ "seed": seed, "round": round, "teacher_forced": tf, "generative": gen }))
    }
}

/// Number of distinct labelled path-star graphs with `d` arms of `m` nodes
/// drawn from `num_nodes` labels.
#[pyfunction]
fn sample_space_size(d: usize, m: usize, num_nodes: usize) -> PyResult<BigUint> {
    graph::sample_space_size(d, m, num_nodes).map_err(value_err)
}

/// Dataset records `start..start + n` for `seed`, as dicts.
#[pyfunction]
#[pyo3(signature = (spec, n, seed = 0, start = 0))]
fn generate(py: Python<'_>, spec: &Spec, n: u64, seed: u64, start: u64) -> PyResult<Py<PyAny>> {
    let records: Vec<_> = py.detach(|| (start..start + n).map(|i| dataset_record(&spec.inner, seed, i)).collect());
    to_py(py, &records)
}

/// Edges and query recovered from a token sequence.
#[pyfunction]
fn parse(py: Python<'_>, tokens: Vec<Token>, max_nodes: usize) -> PyResult<Py<PyAny>> {
    let p = parse_example(&Vocabulary::new(max_nodes), &tokens).map_err(value_err)?;
    to_py(
        py,
        &serde_json::json!({
            "edges": p.edges,
            "query": p.query,
            "query_width": p.query_width,
            "source_len": p.source_len,
        }),
    )
}

/// The target arm (source first) of a tokenized path-star source.
#[pyfunction]
fn solve_path(tokens: Vec<Token>, max_nodes: usize) -> PyResult<Vec<u32>> {
    evaluator::solve_path_oracle(&Vocabulary::new(max_nodes), &tokens).map_err(value_err)
}

#[pyfunction]
fn render(tokens: Vec<Token>, max_nodes: usize) -> String {
    Vocabulary::new(max_nodes).render(&tokens)
}

/// Trains every seed of `spec`; returns one record dict per seed.
#[pyfunction]
#[pyo3(signature = (spec, out_dir = None, resume = false, max_steps = None))]
fn train(py: Python<'_>, spec: &Spec, out_dir: Option<PathBuf>, resume: bool, max_steps: Option<u64>) -> PyResult<Py<PyAny>> {
    let opts = RunOptions { out_dir, resume, max_steps, on_eval: None };
    let records = py.detach(|| trainer::run_experiment(&spec.inner, &opts)).map_err(value_err)?;
    to_py(py, &records)
}

#[pyfunction]
fn load_records(py: Python<'_>, out_dir: PathBuf) -> PyResult<Py<PyAny>> {
    let records = trainer::load_records(&out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    to_py(py, &records)
}

/// Summary row over `(seed, teacher_forced, generative)` trial scores.
#[pyfunction]
fn aggregate(py: Python<'_>, experiment: &str, d: &str, m: &str, threshold_d: usize, trials: Vec<(u64, f64, Option<f64>)>) -> PyResult<Py<PyAny>> {
    let trials: Vec<TrialScores> =
        trials.into_iter().map(|(seed, teacher_forced, generative)| TrialScores { seed, teacher_forced, generative }).collect();
    to_py(py, &evaluator::aggregate(experiment, d, m, threshold_d, &trials))
}

#[pymodule]
#[pyo3(name = "pathstar")]
fn pathstar_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Spec>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(sample_space_size, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    m.add_function(wrap_pyfunction!(solve_path, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(load_records, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add("NUM_SPECIAL", pathstar::tokenizer::NUM_SPECIAL)?;
    m.add("NODE_OFFSET", pathstar::tokenizer::NODE_OFFSET)?;
    Ok(())
}
