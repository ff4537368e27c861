//! Iterative reasoning with dual process-reward screening.
//!
//! Each iteration retrieves triples for `question ⊕ previous CoT step`,
//! lets the generator propose N triples, keeps the one with the best
//! KG-PRM step reward, then proposes N CoT steps grounded in that triple
//! and keeps the one with the best CoT-PRM step reward. The loop ends when
//! a step mentions the stop keyword or the iteration budget is spent.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cot::{self, Cot};
use crate::error::{Error, Result};
use crate::generator::{CotStepRequest, FinalRequest, Generator, KgStepRequest};
use crate::kg::{reconstruct_triple, Graph, KgPath, Triple, STEP_SEPARATOR};
use crate::lm::{score_steps, LanguageModel};
use crate::prompts;
use crate::retrieval::{embedding_tokens, Embedder, EmbeddingIndex};
use crate::reward::{last_step_reward, RewardConfig};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonConfig {
    pub n_max_iterations: usize,
    pub n_candidates: usize,
    pub top_m: usize,
    /// Sampling temperature for candidate generation.
    pub temperature: f64,
    pub seed: u64,
    pub stop_keyword: String,
    pub strengths: RewardConfig,
    /// Extra attempts per generation call on transport errors.
    pub retries: usize,
}

impl Default for ReasonConfig {
    fn default() -> Self {
        Self {
            n_max_iterations: 4,
            n_candidates: 8,
            top_m: 25,
            temperature: 0.8,
            seed: 0,
            stop_keyword: "answer".into(),
            strengths: RewardConfig::default(),
            retries: 2,
        }
    }
}

impl ReasonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 || self.top_m == 0 || self.n_max_iterations == 0 {
            return Err(Error::Contract(
                "N, m and the iteration limit must all be at least 1".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Contract(format!(
                "invalid temperature {}",
                self.temperature
            )));
        }
        RewardConfig::new(self.strengths.beta, self.strengths.gamma)?;
        Ok(())
    }
}

/// Policy and reference models of both PRMs.
#[derive(Clone, Copy)]
pub struct Prms<'a> {
    pub kg_policy: &'a dyn LanguageModel,
    pub kg_reference: &'a dyn LanguageModel,
    pub cot_policy: &'a dyn LanguageModel,
    pub cot_reference: &'a dyn LanguageModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepChoice {
    pub candidates: Vec<String>,
    /// `None` where scoring failed.
    pub rewards: Vec<Option<f64>>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub query: String,
    pub kg: StepChoice,
    /// Filled once the iteration's CoT step is chosen.
    pub cot: Option<StepChoice>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonState {
    pub question: String,
    pub kg_path: Vec<Triple>,
    pub cot: Cot,
    pub iteration: usize,
    pub finished: bool,
    pub trace: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonOutput {
    pub answer: String,
    pub prompt_hard: String,
    pub prompt_soft: String,
    pub state: ReasonState,
}

/// Picks the highest reward, lowest index on ties. Failed or NaN scores
/// are excluded.
pub fn best_of_n<T, F>(candidates: &[T], scorer: F) -> Result<(usize, Vec<Option<f64>>)>
where
    T: Sync,
    F: Fn(&T) -> Result<f64> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::NoViableCandidate(0));
    }
    let rewards: Vec<Option<f64>> = candidates
        .par_iter()
        .map(|c| match scorer(c) {
            Ok(r) if !r.is_nan() => Some(r),
            Ok(_) => None,
            Err(e) => {
                log::debug!("candidate dropped: {e}");
                None
            }
        })
        .collect();
    let winner = select(&rewards).ok_or(Error::NoViableCandidate(candidates.len()))?;
    Ok((winner, rewards))
}

/// Argmax over scored entries with the lowest-index tie rule.
pub fn select(rewards: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rewards.iter().enumerate() {
        if let Some(r) = *r {
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((i, r));
            }
        }
    }
    best.map(|b| b.0)
}

/// Graph entities mentioned in free text, in order of first mention.
pub fn mentioned_entities(graph: &Graph, text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for raw in text.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '~')) {
        if !raw.is_empty() && graph.has_entity(raw) && seen.insert(raw.to_string()) {
            out.push(raw.to_string());
        }
    }
    if out.is_empty() {
        // fall back to case-insensitive matching
        let lowered: HashSet<String> = embedding_tokens(text).into_iter().collect();
        for e in graph.entities() {
            if lowered.contains(&e.to_lowercase()) && seen.insert(e.clone()) {
                out.push(e.clone());
            }
        }
    }
    out
}

/// Entities a CoT step commits to: its parsed triple under the toy step
/// grammar, else the previous path tail plus any graph entities named.
pub fn step_sources(graph: &Graph, content: &str, previous: Option<&Triple>) -> HashSet<String> {
    let parsed = cot::step_entities(content);
    if !parsed.is_empty() {
        return parsed.into_iter().collect();
    }
    let mut out: HashSet<String> = mentioned_entities(graph, content).into_iter().collect();
    if let Some(p) = previous {
        out.insert(p.tail.clone());
    }
    out
}

/// Adjacency-list textualization of a path.
pub fn soft_graph_text(path: &[Triple]) -> String {
    let mut order: Vec<&str> = Vec::new();
    for t in path {
        for e in [t.head.as_str(), t.tail.as_str()] {
            if !order.contains(&e) {
                order.push(e);
            }
        }
    }
    order
        .iter()
        .map(|e| {
            let edges: Vec<String> = path
                .iter()
                .filter(|t| t.head == *e)
                .map(|t| format!("{} -> {}", t.relation_label(), t.tail))
                .collect();
            if edges.is_empty() {
                format!("{e}:")
            } else {
                format!("{e}: {}", edges.join(", "))
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct Engine<'a> {
    pub graph: &'a Graph,
    pub index: &'a EmbeddingIndex,
    pub embedder: &'a Embedder,
    pub generator: &'a dyn Generator,
    pub prms: Prms<'a>,
    pub config: ReasonConfig,
}

impl<'a> Engine<'a> {
    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match call() {
                Err(Error::Transport(m)) if attempt < self.config.retries => {
                    attempt += 1;
                    log::warn!("generation failed ({m}), retry {attempt}");
                }
                other => return other,
            }
        }
    }

    fn seed(&self, question: &str, iteration: usize, what: &str) -> u64 {
        derive_seed(
            self.config.seed,
            &format!("{question}\u{1f}{iteration}\u{1f}{what}"),
        )
    }

    fn retrieve(&self, query: &str) -> Result<Vec<(Triple, f64)>> {
        let q = self.embedder.embed_one(query)?;
        let hits = self.index.top_m(&q, self.config.top_m)?;
        Ok(hits
            .into_iter()
            .map(|(i, s)| (self.graph.triples()[i].clone(), s))
            .collect())
    }

    fn kg_reward(&self, question: &str, path: &[Triple], candidate: &Triple) -> Result<f64> {
        let mut steps: Vec<String> = path.iter().map(Triple::to_string).collect();
        steps.push(candidate.to_string());
        let joiner = format!(" {STEP_SEPARATOR} ");
        let seq = score_steps(
            self.prms.kg_policy,
            self.prms.kg_reference,
            question,
            &steps,
            &joiner,
            false,
        )?;
        last_step_reward(&seq, self.config.strengths.gamma)
    }

    fn cot_reward(&self, question: &str, cot: &Cot, candidate: &str) -> Result<f64> {
        let mut steps = cot.lines();
        steps.push(cot::step_line(cot.len(), candidate));
        let seq = score_steps(
            self.prms.cot_policy,
            self.prms.cot_reference,
            question,
            &steps,
            "\n",
            false,
        )?;
        last_step_reward(&seq, self.config.strengths.beta)
    }

    /// Proposes, reconstructs and screens one KG step.
    fn choose_triple(
        &self,
        state: &ReasonState,
        query: &str,
        sources: &HashSet<String>,
        warnings: &mut Vec<String>,
    ) -> Result<(Triple, StepChoice)> {
        let mut retrieved = self.retrieve(query)?;
        if retrieved.is_empty() {
            retrieved = self.retrieve(&state.question)?;
        }
        let previous = state.cot.last();
        let req = KgStepRequest {
            question: &state.question,
            previous_step: previous,
            retrieved: &retrieved,
            path: &state.kg_path,
            anchors: sources,
            temperature: self.config.temperature,
        };
        let seed = self.seed(&state.question, state.iteration, "kg");
        let raw = self.with_retries(|| {
            self.generator
                .kg_candidates(&req, self.config.n_candidates, seed)
        })?;
        let mut candidates: Vec<Triple> = if sources.is_empty() {
            raw.clone()
        } else {
            raw.iter()
                .filter_map(|t| reconstruct_triple(t, sources).ok())
                .collect()
        };
        if candidates.is_empty() {
            warnings.push("no candidate triple connects to the previous step; using unreconstructed candidates".into());
            log::warn!("{}", warnings.last().unwrap());
            candidates = raw;
        }
        let (winner, rewards) = best_of_n(&candidates, |t| {
            self.kg_reward(&state.question, &state.kg_path, t)
        })?;
        let choice = StepChoice {
            candidates: candidates.iter().map(Triple::to_string).collect(),
            rewards,
            selected: winner,
        };
        Ok((candidates.swap_remove(winner), choice))
    }

    fn choose_step(&self, state: &ReasonState, fact: &Triple) -> Result<(String, StepChoice)> {
        let req = CotStepRequest {
            question: &state.question,
            fact,
            cot: &state.cot,
            step: state.cot.len() + 1,
            temperature: self.config.temperature,
        };
        let seed = self.seed(&state.question, state.iteration, "cot");
        let mut candidates = self.with_retries(|| {
            self.generator
                .cot_candidates(&req, self.config.n_candidates, seed)
        })?;
        let (winner, rewards) = best_of_n(&candidates, |c| {
            self.cot_reward(&state.question, &state.cot, c)
        })?;
        let choice = StepChoice {
            candidates: candidates.clone(),
            rewards,
            selected: winner,
        };
        Ok((candidates.swap_remove(winner), choice))
    }

    fn is_stop(&self, step: &str) -> bool {
        step.to_lowercase()
            .contains(&self.config.stop_keyword.to_lowercase())
    }

    /// Retrieves, proposes and screens the next triple, opening a new
    /// iteration.
    pub fn kg_step(&self, state: &mut ReasonState) -> Result<()> {
        if state.finished {
            return Err(Error::Contract("reasoning already finished".into()));
        }
        if state.kg_path.len() != state.cot.len() {
            return Err(Error::Contract(
                "a KG step must follow a completed CoT step".into(),
            ));
        }
        let mut warnings = Vec::new();
        let (query, sources) = match state.cot.last() {
            None => (
                state.question.clone(),
                mentioned_entities(self.graph, &state.question)
                    .into_iter()
                    .collect(),
            ),
            Some(prev) => (
                format!("{} {}", state.question, prev),
                step_sources(self.graph, prev, state.kg_path.last()),
            ),
        };
        state.iteration += 1;
        let (triple, kg) = self.choose_triple(state, &query, &sources, &mut warnings)?;
        state.kg_path.push(triple);
        state.trace.push(IterationRecord {
            iteration: state.iteration,
            query,
            kg,
            cot: None,
            warnings,
        });
        Ok(())
    }

    /// Writes the CoT step grounded in the newest triple and applies the
    /// stop rule.
    pub fn cot_step(&self, state: &mut ReasonState) -> Result<()> {
        if state.finished || state.kg_path.len() != state.cot.len() + 1 {
            return Err(Error::Contract("a CoT step must follow a KG step".into()));
        }
        let fact = state.kg_path.last().cloned().expect("non-empty path");
        let (step, choice) = self.choose_step(state, &fact)?;
        state.finished = self.is_stop(&step) || state.iteration >= self.config.n_max_iterations;
        state.cot.push(step);
        if let Some(rec) = state.trace.last_mut() {
            rec.cot = Some(choice);
        }
        Ok(())
    }

    fn iterate(&self, state: &mut ReasonState) -> Result<()> {
        self.kg_step(state)?;
        self.cot_step(state)
    }

    fn fail(&self, state: &ReasonState, e: Error) -> Error {
        match e {
            Error::Engine { .. } => e,
            other => Error::Engine {
                message: other.to_string(),
                trace: serde_json::to_string(state).unwrap_or_default(),
            },
        }
    }

    pub fn new_state(&self, question: &str) -> ReasonState {
        ReasonState {
            question: question.to_string(),
            kg_path: Vec::new(),
            cot: Cot::default(),
            iteration: 0,
            finished: false,
            trace: Vec::new(),
        }
    }

    /// First triple and first CoT step.
    pub fn initialize(&self, question: &str) -> Result<ReasonState> {
        self.config.validate()?;
        if self.graph.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut state = self.new_state(question);
        self.iterate(&mut state).map_err(|e| self.fail(&state, e))?;
        Ok(state)
    }

    /// Continues an unfinished state by one iteration.
    pub fn step(&self, state: &mut ReasonState) -> Result<()> {
        self.iterate(state).map_err(|e| self.fail(state, e))
    }

    pub fn run(&self, question: &str) -> Result<ReasonOutput> {
        let mut state = self.initialize(question)?;
        while !state.finished {
            self.step(&mut state)?;
        }
        let facts: Vec<String> = state.kg_path.iter().map(cot::triple_sentence).collect();
        let prompt_hard = prompts::render_named(
            prompts::FINAL_HARD,
            &[
                ("question", question),
                ("cot", &state.cot.render()),
                ("facts", &facts.join("\n")),
            ],
        )?;
        let prompt_soft = prompts::render_named(
            prompts::FINAL_SOFT,
            &[("graph", &soft_graph_text(&state.kg_path))],
        )?;
        let path = KgPath::new(state.kg_path.clone())?;
        let req = FinalRequest {
            question,
            prompt_hard: &prompt_hard,
            prompt_soft: &prompt_soft,
            cot: &state.cot,
            path: &path,
        };
        let seed = self.seed(question, state.iteration, "final");
        let answer = self
            .with_retries(|| self.generator.final_answer(&req, seed))
            .map_err(|e| self.fail(&state, e))?;
        Ok(ReasonOutput {
            answer,
            prompt_hard,
            prompt_soft,
            state,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_rules() {
        assert_eq!(select(&[Some(0.1), Some(0.1), Some(0.05)]), Some(0));
        assert_eq!(select(&[None, Some(-1.0), Some(0.5)]), Some(2));
        assert_eq!(select(&[None, None]), None);
        let (w, r) = best_of_n(&[1.0, f64::NAN, 3.0], |x| Ok(*x)).unwrap();
        assert_eq!((w, r), (2, vec![Some(1.0), None, Some(3.0)]));
        assert!(matches!(
            best_of_n(&[1.0], |_| Err::<f64, _>(Error::Numeric("x".into()))),
            Err(Error::NoViableCandidate(1))
        ));
        assert_eq!(best_of_n(&[7], |_| Ok(0.0)).unwrap().0, 0);
    }

    #[test]
    fn soft_prompt() {
        let p = vec![
            Triple::new("A", "r", "B"),
            Triple::from_labels("B", "~s", "C"),
        ];
        assert_eq!(soft_graph_text(&p), "A: r -> B\nB: ~s -> C\nC:");
    }

    #[test]
    fn sources_from_steps() {
        let g = Graph::from_triples(vec![Triple::new("Paris", "capital_of", "France")]);
        let s = step_sources(&g, "Paris capital_of France.", None);
        assert_eq!(
            s,
            ["Paris", "France"].iter().map(|x| x.to_string()).collect()
        );
        let prev = Triple::new("X", "y", "Z");
        let s = step_sources(&g, "It is in france, surely", Some(&prev));
        assert_eq!(s, ["France", "Z"].iter().map(|x| x.to_string()).collect());
        assert_eq!(
            mentioned_entities(&g, "What is the capital_of of Paris?"),
            vec!["Paris"]
        );
    }
}
