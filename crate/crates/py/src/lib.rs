//! Python bindings: metrics, step rewards, the identity check, and a
//! toy-mode reasoner over a trained model bundle.

use std::path::PathBuf;

use dprm_core::eval::{self, Variant};
use dprm_core::foundry::{read_qa, FoundryConfig};
use dprm_core::generator::ToyGenerator;
use dprm_core::kg::Graph;
use dprm_core::lm::ScoredSequence;
use dprm_core::pipeline::{self, PrmBundle, ToyModelConfig};
use dprm_core::reasoning::{Engine, ReasonConfig};
use dprm_core::retrieval::{Embedder, EmbeddingIndex, IdfWeights, BUILTIN_DIM};
use dprm_core::synth::{self, SynthConfig};
use dprm_core::train::{self as trainer, TrainConfig};
use dprm_core::{cli, reward, Error};
use pyo3::exceptions::{PyConnectionError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Transport(m) => PyConnectionError::new_err(m),
        Error::Contract(_) | Error::Tokenization(_) | Error::Alignment(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyfunction]
fn normalize_answer(text: &str) -> String {
    eval::normalize_answer(text)
}

#[pyfunction]
fn hit_at_1(prediction: &str, golds: Vec<String>) -> bool {
    eval::hit_at_1(prediction, &golds)
}

#[pyfunction]
fn f1(predicted: Vec<String>, golds: Vec<String>) -> f64 {
    eval::f1(&predicted, &golds)
}

/// `(q_values, step_rewards, total)` for one scored completion.
#[pyfunction]
fn step_rewards(
    policy: Vec<f64>,
    reference: Vec<f64>,
    boundaries: Vec<usize>,
    strength: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    let seq = ScoredSequence::from_logprobs(&policy, &reference, boundaries).map_err(py_err)?;
    let r = reward::step_rewards(&seq, strength).map_err(py_err)?;
    Ok((r.q_values, r.step_rewards, r.total))
}

#[pyfunction]
fn pairwise_loss(reward_chosen: f64, reward_rejected: f64) -> PyResult<f64> {
    trainer::pairwise_loss(reward_chosen, reward_rejected).map_err(py_err)
}

/// `(max_relative_error, instances)` against the enumeration oracle.
#[pyfunction]
#[pyo3(signature = (instances = 50, seed = 0))]
fn verify_proposition(instances: usize, seed: u64) -> PyResult<(f64, usize)> {
    let r = reward::verify_proposition(instances, seed).map_err(py_err)?;
    Ok((r.max_rel_err, r.cases.len()))
}

/// Writes `graph.tsv`, `train.jsonl` and `test.jsonl` for a planted graph.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 7, layers = None, test_questions = None))]
fn synthesize(
    out_dir: PathBuf,
    seed: u64,
    layers: Option<Vec<usize>>,
    test_questions: Option<usize>,
) -> PyResult<(usize, usize, usize)> {
    let mut cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    if let Some(l) = layers {
        cfg.layers = l;
        cfg.chain_relations
            .truncate(cfg.layers.len().saturating_sub(1));
    }
    if let Some(t) = test_questions {
        cfg.test_questions = t;
    }
    let kg = synth::generate(&cfg).map_err(py_err)?;
    std::fs::create_dir_all(&out_dir)?;
    cli::write_graph_tsv(&kg.graph, &out_dir.join("graph.tsv")).map_err(py_err)?;
    for (name, rows) in [("train.jsonl", &kg.train), ("test.jsonl", &kg.test)] {
        let body: Vec<String> = rows
            .iter()
            .map(serde_json::to_string)
            .collect::<Result<_, _>>()
            .map_err(json_err)?;
        std::fs::write(out_dir.join(name), body.join("\n") + "\n")?;
    }
    Ok((kg.graph.len(), kg.train.len(), kg.test.len()))
}

/// Mines pairs from `train_path` and trains both toy PRMs; writes the
/// bundle JSON to `model_out`.
#[pyfunction]
#[pyo3(signature = (graph_path, train_path, model_out, seed = 0, epochs = None))]
fn train(
    graph_path: PathBuf,
    train_path: PathBuf,
    model_out: PathBuf,
    seed: u64,
    epochs: Option<usize>,
) -> PyResult<Option<f64>> {
    let graph = cli::load_graph(&graph_path).map_err(py_err)?;
    let file = std::io::BufReader::new(std::fs::File::open(&train_path)?);
    let examples = read_qa(file).map_err(py_err)?;
    let pairs = pipeline::generate_all_pairs(&graph, &examples, &FoundryConfig::default(), seed);
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let bundle =
        pipeline::train_bundle(&graph, &pairs, &ToyModelConfig::default(), &cfg).map_err(py_err)?;
    std::fs::write(
        &model_out,
        serde_json::to_string(&bundle).map_err(json_err)?,
    )?;
    Ok(bundle.kg.report.margin_accuracy)
}

/// Answer, path as `(head, relation, tail)` tuples, and CoT steps.
type Reasoned = (String, Vec<(String, String, String)>, Vec<String>);

/// Toy-mode reasoner over a graph and a trained bundle.
#[pyclass]
struct Reasoner {
    graph: Graph,
    bundle: PrmBundle,
    embedder: Embedder,
    index: EmbeddingIndex,
    config: ReasonConfig,
}

impl Reasoner {
    fn run<T>(&self, variant: Variant, f: impl FnOnce(&Engine<'_>) -> T) -> T {
        let generator = ToyGenerator::new(&self.graph);
        let engine = Engine {
            graph: &self.graph,
            index: &self.index,
            embedder: &self.embedder,
            generator: &generator,
            prms: self.bundle.prms(variant.uses_cotraining()),
            config: variant.apply(&self.config),
        };
        f(&engine)
    }
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    name.parse().map_err(py_err)
}

#[pymethods]
impl Reasoner {
    #[new]
    #[pyo3(signature = (graph_path, model_path, n = 8, iterations = 4, seed = 0))]
    fn new(
        graph_path: PathBuf,
        model_path: PathBuf,
        n: usize,
        iterations: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let graph = cli::load_graph(&graph_path).map_err(py_err)?;
        let bundle: PrmBundle =
            serde_json::from_str(&std::fs::read_to_string(&model_path)?).map_err(json_err)?;
        let embedder = Embedder::Idf(IdfWeights::fit(&graph, BUILTIN_DIM));
        let index = EmbeddingIndex::build(&graph, &embedder).map_err(py_err)?;
        let config = ReasonConfig {
            n_candidates: n,
            n_max_iterations: iterations,
            seed,
            ..ReasonConfig::default()
        };
        config.validate().map_err(py_err)?;
        Ok(Self {
            graph,
            bundle,
            embedder,
            index,
            config,
        })
    }

    /// `(answer, path, cot)`, with the path as `(head, relation, tail)` tuples.
    #[pyo3(signature = (question, variant = "full"))]
    fn reason(&self, py: Python<'_>, question: &str, variant: &str) -> PyResult<Reasoned> {
        let v = parse_variant(variant)?;
        let out = py
            .allow_threads(|| self.run(v, |e| e.run(question)))
            .map_err(py_err)?;
        let path = out
            .state
            .kg_path
            .iter()
            .map(|t| (t.head.clone(), t.relation_label(), t.tail.clone()))
            .collect();
        Ok((out.answer, path, out.state.cot.steps().to_vec()))
    }

    /// Full trace of one question as JSON.
    #[pyo3(signature = (question, variant = "full"))]
    fn trace_json(&self, py: Python<'_>, question: &str, variant: &str) -> PyResult<String> {
        let v = parse_variant(variant)?;
        let out = py
            .allow_threads(|| self.run(v, |e| e.run(question)))
            .map_err(py_err)?;
        serde_json::to_string(&out).map_err(json_err)
    }

    /// `(hit_at_1, f1)` over a QA JSONL file.
    #[pyo3(signature = (dataset_path, variant = "full"))]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset_path: PathBuf,
        variant: &str,
    ) -> PyResult<(f64, f64)> {
        let v = parse_variant(variant)?;
        let file = std::io::BufReader::new(std::fs::File::open(&dataset_path)?);
        let data = read_qa(file).map_err(py_err)?;
        let report = py
            .allow_threads(|| self.run(v, |e| eval::run_eval(e, &data, v, None)))
            .map_err(py_err)?;
        Ok((report.hit_at_1, report.f1))
    }
}

#[pymodule]
fn dprm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(hit_at_1, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(step_rewards, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_loss, m)?)?;
    m.add_function(wrap_pyfunction!(verify_proposition, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Reasoner>()?;
    Ok(())
}
