//! Candidate generation for the reasoning loop.
//!
//! The gateway generator prompts an instruction-following model. The toy
//! generator is a rule-based stand-in: it draws KG candidates from the
//! retrieved triples and renders CoT candidates from the selected triple
//! with seeded noise, so that screening has something to screen.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cot::{self, Cot};
use crate::error::{Error, Result};
use crate::kg::{Graph, KgPath, Triple};
use crate::lm::{GatewayModel, LanguageModel, SampleParams};
use crate::prompts;
use crate::synth::question_hops;

#[derive(Debug, Clone)]
pub struct KgStepRequest<'a> {
    pub question: &'a str,
    /// Previous CoT step content; `None` at initialization.
    pub previous_step: Option<&'a str>,
    /// Retrieved triples with similarity, best first.
    pub retrieved: &'a [(Triple, f64)],
    /// Path so far.
    pub path: &'a [Triple],
    /// Entities the next triple should attach to; empty when unknown.
    pub anchors: &'a HashSet<String>,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct CotStepRequest<'a> {
    pub question: &'a str,
    pub fact: &'a Triple,
    pub cot: &'a Cot,
    /// 1-based number of the step being written.
    pub step: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct FinalRequest<'a> {
    pub question: &'a str,
    pub prompt_hard: &'a str,
    pub prompt_soft: &'a str,
    pub cot: &'a Cot,
    pub path: &'a KgPath,
}

/// Produces candidate steps and the final answer.
///
/// Candidate `i` of a call with seed `s` must depend only on `s + i`, so
/// that smaller candidate sets are prefixes of larger ones.
pub trait Generator: Send + Sync {
    fn kg_candidates(&self, req: &KgStepRequest<'_>, n: usize, seed: u64) -> Result<Vec<Triple>>;
    fn cot_candidates(&self, req: &CotStepRequest<'_>, n: usize, seed: u64) -> Result<Vec<String>>;
    fn final_answer(&self, req: &FinalRequest<'_>, seed: u64) -> Result<String>;
}

/// Rule-based generator over a known graph.
#[derive(Debug, Clone)]
pub struct ToyGenerator<'g> {
    graph: &'g Graph,
    /// Chance that a CoT candidate misstates its fact.
    pub error_rate: f64,
}

impl<'g> ToyGenerator<'g> {
    pub fn new(graph: &'g Graph) -> Self {
        Self {
            graph,
            error_rate: 0.35,
        }
    }

    pub fn with_error_rate(mut self, error_rate: f64) -> Self {
        self.error_rate = error_rate;
        self
    }
}

impl Generator for ToyGenerator<'_> {
    fn kg_candidates(&self, req: &KgStepRequest<'_>, n: usize, seed: u64) -> Result<Vec<Triple>> {
        if req.retrieved.is_empty() {
            return Err(Error::Contract(
                "no retrieved triples to choose from".into(),
            ));
        }
        if req.temperature.is_nan() || req.temperature <= 0.0 {
            return Err(Error::Contract(format!(
                "invalid temperature {}",
                req.temperature
            )));
        }
        // mimic an instruction follower: skip used edges, prefer attached ones
        let fresh: Vec<&(Triple, f64)> = req
            .retrieved
            .iter()
            .filter(|(t, _)| !req.path.iter().any(|p| p.canonical() == t.canonical()))
            .collect();
        let attached: Vec<&(Triple, f64)> = fresh
            .iter()
            .copied()
            .filter(|(t, _)| req.anchors.contains(&t.head) || req.anchors.contains(&t.tail))
            .collect();
        let pool: Vec<&(Triple, f64)> = if !attached.is_empty() {
            attached
        } else if !fresh.is_empty() {
            fresh
        } else {
            req.retrieved.iter().collect()
        };
        let max = pool.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = pool
            .iter()
            .map(|r| ((r.1 - max) / req.temperature).exp())
            .collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Numeric(e.to_string()))?;
        Ok((0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                pool[dist.sample(&mut rng)].0.clone()
            })
            .collect())
    }

    fn cot_candidates(&self, req: &CotStepRequest<'_>, n: usize, seed: u64) -> Result<Vec<String>> {
        let hops = question_hops(req.question);
        let entities = self.graph.entities();
        let triples = self.graph.triples();
        Ok((0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let mut t = req.fact.clone();
                if rng.random::<f64>() < self.error_rate {
                    if rng.random_bool(0.5) && entities.len() > 1 {
                        loop {
                            let e = &entities[rng.random_range(0..entities.len())];
                            if *e != t.tail {
                                t.tail = e.clone();
                                break;
                            }
                        }
                    } else if !triples.is_empty() {
                        t = triples[rng.random_range(0..triples.len())].clone();
                    }
                }
                let mut content = cot::triple_sentence(&t);
                if hops > 0 && req.step >= hops {
                    content = format!("{content} {}", cot::answer_sentence(&t.tail));
                }
                content
            })
            .collect())
    }

    fn final_answer(&self, req: &FinalRequest<'_>, _seed: u64) -> Result<String> {
        Ok(cot::extract_answer(&req.cot.render())
            .unwrap_or_else(|| req.path.terminal().to_string()))
    }
}

/// Generator backed by a gateway model and the prompt templates.
#[derive(Debug, Clone)]
pub struct GatewayGenerator {
    model: GatewayModel,
    pub max_tokens: usize,
}

impl GatewayGenerator {
    pub fn new(model: GatewayModel) -> Self {
        Self {
            model,
            max_tokens: 128,
        }
    }

    fn sample(
        &self,
        prompt: &str,
        n: usize,
        temperature: f64,
        seed: u64,
        stop: &[&str],
    ) -> Result<Vec<String>> {
        let mut params = SampleParams::new(n, temperature, seed)
            .with_stop(stop.iter().map(|s| s.to_string()).collect());
        params.max_tokens = self.max_tokens;
        self.model.sample(prompt, &params)
    }
}

/// Parses `head | relation | tail`.
pub fn parse_triple_line(line: &str) -> Option<Triple> {
    let parts: Vec<&str> = line
        .trim()
        .trim_matches('`')
        .split('|')
        .map(str::trim)
        .collect();
    match parts.as_slice() {
        [h, r, t] if !h.is_empty() && !r.is_empty() && !t.is_empty() => {
            Some(Triple::from_labels(h, r, t))
        }
        _ => None,
    }
}

impl Generator for GatewayGenerator {
    fn kg_candidates(&self, req: &KgStepRequest<'_>, n: usize, seed: u64) -> Result<Vec<Triple>> {
        let triples = req
            .retrieved
            .iter()
            .map(|(t, _)| t.embedding_text())
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = prompts::render_named(
            prompts::KG_PATH_STEP,
            &[
                ("question", req.question),
                ("previous_step", req.previous_step.unwrap_or("(none)")),
                ("triples", &triples),
            ],
        )?;
        let out: Vec<Triple> = self
            .sample(&prompt, n, req.temperature, seed, &["\n"])?
            .iter()
            .filter_map(|s| parse_triple_line(s))
            .collect();
        if out.is_empty() {
            return Err(Error::Extraction {
                step: 0,
                message: "no candidate triple could be parsed".into(),
            });
        }
        Ok(out)
    }

    fn cot_candidates(&self, req: &CotStepRequest<'_>, n: usize, seed: u64) -> Result<Vec<String>> {
        let fact = cot::triple_sentence(req.fact);
        let so_far = if req.cot.is_empty() {
            "(none)".to_string()
        } else {
            req.cot.render()
        };
        let step = req.step.to_string();
        let prompt = prompts::render_named(
            prompts::COT_STEP,
            &[
                ("question", req.question),
                ("fact", &fact),
                ("cot", &so_far),
                ("step", &step),
            ],
        )?;
        Ok(self
            .sample(&prompt, n, req.temperature, seed, &["\n"])?
            .into_iter()
            .map(|s| s.trim().to_string())
            .collect())
    }

    fn final_answer(&self, req: &FinalRequest<'_>, seed: u64) -> Result<String> {
        let prompt = format!("{}\n{}", req.prompt_hard, req.prompt_soft);
        let out = self.sample(&prompt, 1, 0.0, seed, &["\n"])?;
        Ok(out
            .into_iter()
            .next()
            .unwrap_or_default()
            .trim()
            .to_string())
    }
}
