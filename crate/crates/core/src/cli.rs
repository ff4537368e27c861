//! Command-line entry point.
//!
//! Settings resolve in three layers: built-in defaults, then a `key = value`
//! config file, then flags. Every subcommand that writes artifacts also
//! writes one `<output>.manifest.json` recording the resolved settings.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, Variant};
use crate::foundry::{self, Corruption, FoundryConfig, QaExample};
use crate::generator::{GatewayGenerator, Generator, ToyGenerator};
use crate::kg::{load_triples, Graph, TripleFormat};
use crate::lm::{GatewayClient, GatewayModel, LanguageModel};
use crate::pipeline::{self, PrmBundle, ToyModelConfig};
use crate::reasoning::{Engine, Prms, ReasonConfig};
use crate::retrieval::{Embedder, EmbeddingIndex, IdfWeights, BUILTIN_DIM};
use crate::reward::{self, RewardConfig};
use crate::synth::{self, SynthConfig};
use crate::train::{Phase, TrainConfig};

pub const GATEWAY_ENV: &str = "DPRM_GATEWAY_URL";
/// Largest relative error `verify-prop1` accepts.
pub const PROP1_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(
    name = "dprm",
    version,
    about = "Dual implicit process-reward reasoning over knowledge graphs",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Plain-text `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ReasonFlags {
    /// Candidates per step.
    #[arg(long)]
    pub n: Option<usize>,
    /// Retrieved triples per step.
    #[arg(long)]
    pub m: Option<usize>,
    /// Iteration limit.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Sets both reward strengths.
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub gateway_url: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted synthetic graph with train/test questions.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Mine true paths and write preference pairs as JSONL.
    GenPairs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        pairs_out: PathBuf,
    },
    /// Train both toy PRMs and write the model bundle and training report.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        strength: Option<f64>,
    },
    /// Answer one question and write the answer with its trace.
    Reason {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        /// Trained bundle; required unless all PRMs come from the gateway.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        question: String,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[command(flatten)]
        flags: ReasonFlags,
    },
    /// Evaluate a QA dataset and write an evaluation report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Directory for one trace file per question.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        #[command(flatten)]
        flags: ReasonFlags,
    },
    /// Check step values against the enumeration oracle on random toy models.
    VerifyProp1 {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Probe gateway health and wire-protocol conformance.
    ServeCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gateway_url: Option<String>,
        /// Model name to probe.
        #[arg(long)]
        model: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewaySettings {
    pub url: Option<String>,
    pub retries: usize,
    pub generator: String,
    /// PRM models served by the gateway; toy bundle models when unset.
    pub kg_prm_policy: Option<String>,
    pub kg_prm_ref: Option<String>,
    pub cot_prm_policy: Option<String>,
    pub cot_prm_ref: Option<String>,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            url: None,
            retries: 2,
            generator: "generator".into(),
            kg_prm_policy: None,
            kg_prm_ref: None,
            cot_prm_policy: None,
            cot_prm_ref: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Plain,
    Idf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSettings {
    pub kind: EmbeddingKind,
    pub dim: usize,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Idf,
            dim: BUILTIN_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGeneratorSettings {
    pub error_rate: f64,
}

impl Default for ToyGeneratorSettings {
    fn default() -> Self {
        Self { error_rate: 0.35 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Worker threads; 0 uses every core.
    pub parallelism: usize,
}

/// Every tunable, with defaults materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Settings {
    pub seed: u64,
    pub synth: SynthConfig,
    pub foundry: FoundryConfig,
    pub models: ToyModelConfig,
    pub train: TrainConfig,
    pub reason: ReasonConfig,
    pub toy_generator: ToyGeneratorSettings,
    pub embedding: EmbeddingSettings,
    pub eval: EvalSettings,
    pub gateway: GatewaySettings,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("bad value '{value}' for {key}: {e}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn optional(value: &str) -> Option<String> {
    (!value.is_empty()).then(|| value.to_string())
}

impl Settings {
    /// Applies one dotted `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "synth.layers" => self.synth.layers = parse_list(key, v)?,
            "synth.chain_relations" => self.synth.chain_relations = parse_list(key, v)?,
            "synth.noise_relations" => self.synth.noise_relations = parse_list(key, v)?,
            "synth.noise_triples" => self.synth.noise_triples = parse_value(key, v)?,
            "synth.test_questions" => self.synth.test_questions = parse_value(key, v)?,
            "foundry.max_hops" => self.foundry.max_hops = parse_value(key, v)?,
            "foundry.max_paths" => self.foundry.max_paths = parse_value(key, v)?,
            "foundry.pairs_per_path" => self.foundry.pairs_per_path = parse_value(key, v)?,
            "foundry.distractors" => self.foundry.distractors = parse_value(key, v)?,
            "foundry.kg_kinds" => self.foundry.kg_kinds = parse_list::<Corruption>(key, v)?,
            "foundry.cot_kinds" => self.foundry.cot_kinds = parse_list::<Corruption>(key, v)?,
            "models.kg_order" => self.models.kg_order = parse_value(key, v)?,
            "models.kg_max_len" => self.models.kg_max_len = parse_value(key, v)?,
            "models.cot_order" => self.models.cot_order = parse_value(key, v)?,
            "models.cot_max_len" => self.models.cot_max_len = parse_value(key, v)?,
            "models.max_steps" => self.models.max_steps = parse_value(key, v)?,
            "train.strength" => self.train.strength = parse_value(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse_value(key, v)?,
            "train.epochs" => self.train.epochs = parse_value(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, v)?,
            "train.schedule" => self.train.schedule = parse_list::<Phase>(key, v)?,
            "train.mix_ratio" => {
                let (a, b) = v
                    .split_once(':')
                    .ok_or_else(|| format!("{key} must look like 1:1"))?;
                self.train.mix_ratio = (parse_value(key, a.trim())?, parse_value(key, b.trim())?);
            }
            "reason.n_candidates" => self.reason.n_candidates = parse_value(key, v)?,
            "reason.top_m" => self.reason.top_m = parse_value(key, v)?,
            "reason.n_max_iterations" => self.reason.n_max_iterations = parse_value(key, v)?,
            "reason.temperature" => self.reason.temperature = parse_value(key, v)?,
            "reason.stop_keyword" => self.reason.stop_keyword = v.to_string(),
            "reason.beta" => self.reason.strengths.beta = parse_value(key, v)?,
            "reason.gamma" => self.reason.strengths.gamma = parse_value(key, v)?,
            "reason.retries" => self.reason.retries = parse_value(key, v)?,
            "toy_generator.error_rate" => self.toy_generator.error_rate = parse_value(key, v)?,
            "embedding.kind" => {
                self.embedding.kind = match v {
                    "plain" => EmbeddingKind::Plain,
                    "idf" => EmbeddingKind::Idf,
                    _ => return Err(format!("{key} must be plain or idf")),
                }
            }
            "embedding.dim" => self.embedding.dim = parse_value(key, v)?,
            "eval.parallelism" => self.eval.parallelism = parse_value(key, v)?,
            "gateway.url" => self.gateway.url = optional(v),
            "gateway.retries" => self.gateway.retries = parse_value(key, v)?,
            "gateway.generator" => self.gateway.generator = v.to_string(),
            "gateway.kg_prm_policy" => self.gateway.kg_prm_policy = optional(v),
            "gateway.kg_prm_ref" => self.gateway.kg_prm_ref = optional(v),
            "gateway.cot_prm_policy" => self.gateway.cot_prm_policy = optional(v),
            "gateway.cot_prm_ref" => self.gateway.cot_prm_ref = optional(v),
            other => return Err(format!("unknown setting '{other}'")),
        }
        Ok(())
    }

    /// Applies a config file; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> std::result::Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            self.set(k.trim(), v)
                .map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    /// Copies the global seed into every component.
    fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.reason.seed = self.seed;
    }

    fn apply_reason_flags(&mut self, flags: &ReasonFlags) {
        if let Some(n) = flags.n {
            self.reason.n_candidates = n;
        }
        if let Some(m) = flags.m {
            self.reason.top_m = m;
        }
        if let Some(i) = flags.iterations {
            self.reason.n_max_iterations = i;
        }
        if let Some(s) = flags.strength {
            self.reason.strengths = RewardConfig { beta: s, gamma: s };
        }
        if let Some(u) = &flags.gateway_url {
            self.gateway.url = Some(u.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub resolved_config: Settings,
    pub seed: u64,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: String,
}

/// `<path>.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Domain(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn resolve(common: &Common) -> CliResult<Settings> {
    let mut settings = Settings::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        settings
            .apply_file(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = common.seed {
        settings.seed = seed;
    }
    settings.propagate_seed();
    Ok(settings)
}

fn gateway_url(settings: &Settings) -> Option<String> {
    settings
        .gateway
        .url
        .clone()
        .or_else(|| std::env::var(GATEWAY_ENV).ok().filter(|s| !s.is_empty()))
}

pub fn load_graph(path: &Path) -> Result<Graph> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => TripleFormat::Jsonl,
        _ => TripleFormat::Tsv,
    };
    load_triples(BufReader::new(File::open(path)?), format)
}

pub fn write_graph_tsv(graph: &Graph, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in graph.triples() {
        writeln!(w, "{}\t{}\t{}", t.head, t.relation, t.tail)?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T, F>(path: &Path, read: F) -> Result<Vec<T>>
where
    F: FnOnce(BufReader<File>) -> Result<Vec<T>>,
{
    read(BufReader::new(File::open(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

fn write_jsonl_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    foundry::write_jsonl(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

struct Run {
    command: &'static str,
    config_path: Option<PathBuf>,
    started_at: String,
}

impl Run {
    fn start(command: &'static str, common: &Common) -> Self {
        Self {
            command,
            config_path: common.config.clone(),
            started_at: Utc::now().to_rfc3339(),
        }
    }

    fn finish(self, settings: &Settings, primary: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_path: self.config_path,
            resolved_config: settings.clone(),
            seed: settings.seed,
            outputs,
            started_at: self.started_at,
            finished_at: Utc::now().to_rfc3339(),
        };
        write_json(&manifest_path(primary), &manifest)
    }
}

/// Everything a reasoning run needs besides the question.
struct Setup {
    graph: Graph,
    bundle: Option<PrmBundle>,
    gateway: Option<GatewayClient>,
    gateway_prms: Option<[GatewayModel; 4]>,
    embedder: Embedder,
}

impl Setup {
    fn load(settings: &Settings, graph: &Path, model: Option<&Path>) -> CliResult<Self> {
        let graph = load_graph(graph)?;
        let gateway = gateway_url(settings)
            .map(|u| GatewayClient::new(u).with_retries(settings.gateway.retries));
        let g = &settings.gateway;
        let gateway_prms = match (
            &gateway,
            &g.kg_prm_policy,
            &g.kg_prm_ref,
            &g.cot_prm_policy,
            &g.cot_prm_ref,
        ) {
            (Some(c), Some(a), Some(b), Some(x), Some(y)) => {
                Some([c.model(a), c.model(b), c.model(x), c.model(y)])
            }
            _ => None,
        };
        let bundle = match model {
            Some(p) => {
                Some(serde_json::from_reader(BufReader::new(File::open(p)?)).map_err(Error::from)?)
            }
            None if gateway_prms.is_some() => None,
            None => {
                return Err(Failure::Usage(
                    "--model is required unless every PRM is served by the gateway".into(),
                ))
            }
        };
        let embedder = match (&gateway, settings.embedding.kind) {
            (Some(c), _) => Embedder::Gateway(c.clone()),
            (None, EmbeddingKind::Plain) => Embedder::Builtin {
                dim: settings.embedding.dim,
            },
            (None, EmbeddingKind::Idf) => {
                Embedder::Idf(IdfWeights::fit(&graph, settings.embedding.dim))
            }
        };
        Ok(Self {
            graph,
            bundle,
            gateway,
            gateway_prms,
            embedder,
        })
    }

    fn prms(&self, variant: Variant) -> Prms<'_> {
        if let Some([a, b, c, d]) = &self.gateway_prms {
            return Prms {
                kg_policy: a as &dyn LanguageModel,
                kg_reference: b,
                cot_policy: c,
                cot_reference: d,
            };
        }
        self.bundle
            .as_ref()
            .expect("bundle or gateway PRMs")
            .prms(variant.uses_cotraining())
    }

    fn generator<'g>(&'g self, settings: &Settings) -> Box<dyn Generator + 'g> {
        match &self.gateway {
            Some(c) => Box::new(GatewayGenerator::new(
                c.model(settings.gateway.generator.clone()),
            )),
            None => Box::new(
                ToyGenerator::new(&self.graph).with_error_rate(settings.toy_generator.error_rate),
            ),
        }
    }
}

fn cmd_synth(common: &Common, out_dir: &Path) -> CliResult<()> {
    let settings = resolve(common)?;
    let run = Run::start("synth", common);
    let kg = synth::generate(&settings.synth)?;
    fs::create_dir_all(out_dir).map_err(Error::from)?;
    let graph = out_dir.join("graph.tsv");
    let train = out_dir.join("train.jsonl");
    let test = out_dir.join("test.jsonl");
    write_graph_tsv(&kg.graph, &graph)?;
    write_jsonl_file(&train, &kg.train)?;
    write_jsonl_file(&test, &kg.test)?;
    println!(
        "{} triples, {} train and {} test questions in {}",
        kg.graph.len(),
        kg.train.len(),
        kg.test.len(),
        out_dir.display()
    );
    run.finish(&settings, &out_dir.join("synth"), vec![graph, train, test])?;
    Ok(())
}

fn cmd_gen_pairs(common: &Common, graph: &Path, dataset: &Path, out: &Path) -> CliResult<()> {
    let settings = resolve(common)?;
    let run = Run::start("gen-pairs", common);
    let graph = load_graph(graph)?;
    let qa: Vec<QaExample> = read_lines(dataset, foundry::read_qa)?;
    let pairs = pipeline::generate_all_pairs(&graph, &qa, &settings.foundry, settings.seed);
    write_jsonl_file(out, &pairs)?;
    println!("{} pairs written to {}", pairs.len(), out.display());
    run.finish(&settings, out, vec![out.to_path_buf()])?;
    Ok(())
}

fn cmd_train(
    common: &Common,
    graph: &Path,
    pairs: &Path,
    out: &Path,
    strength: Option<f64>,
) -> CliResult<()> {
    let mut settings = resolve(common)?;
    if let Some(s) = strength {
        settings.train.strength = s;
    }
    let run = Run::start("train", common);
    let graph = load_graph(graph)?;
    let pairs = read_lines(pairs, foundry::read_pairs)?;
    let bundle = pipeline::train_bundle(&graph, &pairs, &settings.models, &settings.train)?;
    write_json(out, &bundle)?;
    let mut report_path = out.as_os_str().to_owned();
    report_path.push(".report.json");
    let report_path = PathBuf::from(report_path);
    write_json(
        &report_path,
        &serde_json::json!({ "kg": bundle.kg.report, "cot": bundle.cot.report }),
    )?;
    println!(
        "held-out margin accuracy: kg {:?}, cot {:?}",
        bundle.kg.report.margin_accuracy, bundle.cot.report.margin_accuracy
    );
    run.finish(&settings, out, vec![out.to_path_buf(), report_path])?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_reason(
    common: &Common,
    graph: &Path,
    model: Option<&Path>,
    question: &str,
    output: &Path,
    variant: Variant,
    flags: &ReasonFlags,
) -> CliResult<()> {
    let mut settings = resolve(common)?;
    settings.apply_reason_flags(flags);
    settings.reason.validate()?;
    let run = Run::start("reason", common);
    let setup = Setup::load(&settings, graph, model)?;
    let index = EmbeddingIndex::build(&setup.graph, &setup.embedder)?;
    let generator = setup.generator(&settings);
    let engine = Engine {
        graph: &setup.graph,
        index: &index,
        embedder: &setup.embedder,
        generator: generator.as_ref(),
        prms: setup.prms(variant),
        config: variant.apply(&settings.reason),
    };
    let out = engine.run(question)?;
    write_json(output, &out)?;
    println!("{}", out.answer);
    run.finish(&settings, output, vec![output.to_path_buf()])?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: &Common,
    graph: &Path,
    model: Option<&Path>,
    dataset: &Path,
    output: &Path,
    variant: Variant,
    trace_dir: Option<&Path>,
    flags: &ReasonFlags,
) -> CliResult<()> {
    let mut settings = resolve(common)?;
    settings.apply_reason_flags(flags);
    settings.reason.validate()?;
    let run = Run::start("eval", common);
    let setup = Setup::load(&settings, graph, model)?;
    let qa: Vec<QaExample> = read_lines(dataset, foundry::read_qa)?;
    let index = EmbeddingIndex::build(&setup.graph, &setup.embedder)?;
    let generator = setup.generator(&settings);
    let engine = Engine {
        graph: &setup.graph,
        index: &index,
        embedder: &setup.embedder,
        generator: generator.as_ref(),
        prms: setup.prms(variant),
        config: variant.apply(&settings.reason),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.eval.parallelism)
        .build()
        .map_err(|e| Error::Contract(e.to_string()))?;
    let report = pool.install(|| eval::run_eval(&engine, &qa, variant, trace_dir))?;
    write_json(output, &report)?;
    println!(
        "{variant}: Hit@1 {:.4}, F1 {:.4} over {} questions",
        report.hit_at_1,
        report.f1,
        report.questions.len()
    );
    let mut outputs = vec![output.to_path_buf()];
    outputs.extend(trace_dir.map(Path::to_path_buf));
    run.finish(&settings, output, outputs)?;
    Ok(())
}

fn cmd_verify(common: &Common, instances: usize, output: Option<&Path>) -> CliResult<()> {
    let settings = resolve(common)?;
    let run = Run::start("verify-prop1", common);
    let report = reward::verify_proposition(instances, settings.seed)?;
    println!(
        "{} instances, max relative error {:e}",
        report.cases.len(),
        report.max_rel_err
    );
    if let Some(out) = output {
        write_json(out, &report)?;
        run.finish(&settings, out, vec![out.to_path_buf()])?;
    }
    if report.max_rel_err < PROP1_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Domain(Error::Numeric(format!(
            "max relative error {:e} exceeds {PROP1_TOLERANCE:e}",
            report.max_rel_err
        ))))
    }
}

fn cmd_serve_check(common: &Common, url: Option<&str>, model: Option<&str>) -> CliResult<()> {
    let mut settings = resolve(common)?;
    if let Some(u) = url {
        settings.gateway.url = Some(u.to_string());
    }
    let url = gateway_url(&settings).ok_or_else(|| {
        Failure::Usage(format!(
            "no gateway URL: pass --gateway-url or set {GATEWAY_ENV}"
        ))
    })?;
    let client = GatewayClient::new(url).with_retries(settings.gateway.retries);
    if !client.health()? {
        return Err(Failure::Domain(Error::Transport(
            "gateway is not healthy".into(),
        )));
    }
    let model = model.unwrap_or(&settings.gateway.generator);
    let report = client.conformance_check(model);
    for c in &report.checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Domain(Error::Contract(
            "gateway failed conformance".into(),
        )))
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth { common, out_dir } => cmd_synth(common, out_dir),
        Command::GenPairs {
            common,
            graph,
            dataset,
            pairs_out,
        } => cmd_gen_pairs(common, graph, dataset, pairs_out),
        Command::Train {
            common,
            graph,
            pairs,
            model_out,
            strength,
        } => cmd_train(common, graph, pairs, model_out, *strength),
        Command::Reason {
            common,
            graph,
            model,
            question,
            output,
            variant,
            flags,
        } => cmd_reason(
            common,
            graph,
            model.as_deref(),
            question,
            output,
            *variant,
            flags,
        ),
        Command::Eval {
            common,
            graph,
            model,
            dataset,
            output,
            variant,
            trace_dir,
            flags,
        } => cmd_eval(
            common,
            graph,
            model.as_deref(),
            dataset,
            output,
            *variant,
            trace_dir.as_deref(),
            flags,
        ),
        Command::VerifyProp1 {
            common,
            instances,
            output,
        } => cmd_verify(common, *instances, output.as_deref()),
        Command::ServeCheck {
            common,
            gateway_url,
            model,
        } => cmd_serve_check(common, gateway_url.as_deref(), model.as_deref()),
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 1 on a domain error, 2 on a usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
