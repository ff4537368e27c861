//! Answer metrics and dataset-level evaluation with ablation variants.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundry::QaExample;
use crate::reasoning::{Engine, ReasonConfig, ReasonOutput};

/// Delimiter between answers in a multi-answer prediction.
pub const ANSWER_DELIMITER: &str = "; ";

/// Lowercase, trim, collapse whitespace, strip surrounding punctuation.
pub fn normalize_answer(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Whether any normalized gold occurs in the normalized prediction.
pub fn hit_at_1(prediction: &str, golds: &[String]) -> bool {
    let p = normalize_answer(prediction);
    golds
        .iter()
        .map(|g| normalize_answer(g))
        .any(|g| !g.is_empty() && p.contains(&g))
}

fn answer_set<S: AsRef<str>>(items: &[S]) -> BTreeSet<String> {
    items
        .iter()
        .map(|s| normalize_answer(s.as_ref()))
        .filter(|s| !s.is_empty())
        .collect()
}

/// Set F1 over normalized, de-duplicated answers.
pub fn f1<P: AsRef<str>, G: AsRef<str>>(predicted: &[P], golds: &[G]) -> f64 {
    let p = answer_set(predicted);
    let g = answer_set(golds);
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let common = p.intersection(&g).count() as f64;
    let precision = common / p.len() as f64;
    let recall = common / g.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Splits a final answer into its answer set.
pub fn split_answers(answer: &str) -> Vec<String> {
    answer
        .split(ANSWER_DELIMITER)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCotrain,
    NoIteration,
    NoBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoCotrain,
        Variant::NoIteration,
        Variant::NoBoth,
    ];

    pub fn uses_cotraining(self) -> bool {
        matches!(self, Variant::Full | Variant::NoIteration)
    }

    pub fn iterates(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCotrain)
    }

    /// The reasoning config this variant runs with.
    pub fn apply(self, config: &ReasonConfig) -> ReasonConfig {
        let mut c = config.clone();
        if !self.iterates() {
            c.n_max_iterations = 1;
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoCotrain => "no_cotrain",
            Variant::NoIteration => "no_iteration",
            Variant::NoBoth => "no_both",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Contract(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub hit: bool,
    pub f1: f64,
    pub answer: String,
    pub golds: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Completed loop bodies.
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub hit_at_1: f64,
    pub f1: f64,
    pub questions: Vec<QuestionRecord>,
    pub config_echo: ReasonConfig,
}

impl EvalReport {
    /// Builds a report with aggregates recomputed from `questions`, which
    /// are sorted by id.
    pub fn from_records(
        variant: Variant,
        mut questions: Vec<QuestionRecord>,
        config: ReasonConfig,
    ) -> Result<Self> {
        if questions.is_empty() {
            return Err(Error::Contract(
                "evaluation needs at least one question".into(),
            ));
        }
        questions.sort_by(|a, b| a.id.cmp(&b.id));
        let n = questions.len() as f64;
        let hit_at_1 = questions.iter().filter(|q| q.hit).count() as f64 / n;
        let f1 = questions.iter().map(|q| q.f1).sum::<f64>() / n;
        Ok(Self {
            variant,
            hit_at_1,
            f1,
            questions,
            config_echo: config,
        })
    }
}

pub fn score_answer(qa: &QaExample, answer: &str) -> (bool, f64) {
    (
        hit_at_1(answer, &qa.answers),
        f1(&split_answers(answer), &qa.answers),
    )
}

/// Runs `engine` (already configured for the variant) over `dataset`.
///
/// A failed question counts as a miss. When `trace_dir` is given, each
/// question's output or error is written to `<id>.json` there.
pub fn run_eval(
    engine: &Engine<'_>,
    dataset: &[QaExample],
    variant: Variant,
    trace_dir: Option<&Path>,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Contract(
            "evaluation needs at least one question".into(),
        ));
    }
    if let Some(dir) = trace_dir {
        std::fs::create_dir_all(dir)?;
    }
    let records: Vec<QuestionRecord> = dataset
        .par_iter()
        .map(|qa| -> Result<QuestionRecord> {
            let out = engine.run(&qa.question);
            if let Some(dir) = trace_dir {
                let body = match &out {
                    Ok(o) => serde_json::to_string_pretty(o)?,
                    Err(e) => serde_json::to_string_pretty(
                        &serde_json::json!({ "error": e.to_string() }),
                    )?,
                };
                std::fs::write(dir.join(format!("{}.json", qa.id)), body)?;
            }
            Ok(record(qa, out))
        })
        .collect::<Result<_>>()?;
    EvalReport::from_records(variant, records, engine.config.clone())
}

fn record(qa: &QaExample, out: Result<ReasonOutput>) -> QuestionRecord {
    match out {
        Ok(o) => {
            let (hit, f1) = score_answer(qa, &o.answer);
            QuestionRecord {
                id: qa.id.clone(),
                hit,
                f1,
                answer: o.answer,
                golds: qa.answers.clone(),
                error: None,
                iterations: o.state.iteration,
            }
        }
        Err(e) => {
            log::warn!("question {} failed: {e}", qa.id);
            QuestionRecord {
                id: qa.id.clone(),
                hit: false,
                f1: 0.0,
                answer: String::new(),
                golds: qa.answers.clone(),
                error: Some(e.to_string()),
                iterations: 0,
            }
        }
    }
}
