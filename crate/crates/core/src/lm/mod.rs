//! Autoregressive language-model abstraction.
//!
//! Two backends implement [`LanguageModel`]: the tabular [`ToyLm`], which can
//! also enumerate every completion exactly, and [`GatewayClient`], which
//! speaks the JSON wire protocol of an external model gateway.

mod gateway;
mod toy;

pub use gateway::{
    ConformanceCheck, ConformanceReport, EmbedRequest, EmbedResponse, GatewayClient, GatewayError,
    GatewayModel, LogprobsRequest, LogprobsResponse, SampleRequestBody, SampleResponse,
};
pub use toy::{enumerate_completions, Tokenizer, ToyLm, Visit, END_TOKEN, MAX_ENUMERATION_LEAVES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    /// Natural-log conditional probability.
    pub logprob: f64,
}

/// Parameters of a sampling call.
#[derive(Debug, Clone)]
pub struct SampleParams {
    pub n: usize,
    pub stop: Vec<String>,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: usize,
}

impl SampleParams {
    pub fn new(n: usize, temperature: f64, seed: u64) -> Self {
        Self {
            n,
            stop: Vec::new(),
            temperature,
            seed,
            max_tokens: 256,
        }
    }

    pub fn with_stop(mut self, stop: Vec<String>) -> Self {
        self.stop = stop;
        self
    }
}

pub trait LanguageModel: Send + Sync {
    /// Per-token log-probabilities of `completion` given `prompt`.
    fn score(&self, prompt: &str, completion: &str) -> Result<Vec<TokenScore>>;

    /// Draws `params.n` completions, each cut at the first stop string.
    fn sample(&self, prompt: &str, params: &SampleParams) -> Result<Vec<String>>;

    /// Text of the end-of-sequence token, when the model exposes one as text.
    fn end_marker(&self) -> Option<&str> {
        None
    }
}

/// Policy and reference log-probabilities for one completion, split into steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub prompt: String,
    pub completion_tokens: Vec<TokenScore>,
    pub ref_tokens: Vec<TokenScore>,
    /// Exclusive end index of each step; the last equals the token count.
    pub step_boundaries: Vec<usize>,
}

impl ScoredSequence {
    pub fn new(
        prompt: impl Into<String>,
        completion_tokens: Vec<TokenScore>,
        ref_tokens: Vec<TokenScore>,
        step_boundaries: Vec<usize>,
    ) -> Result<Self> {
        if completion_tokens.len() != ref_tokens.len() {
            return Err(Error::Alignment(format!(
                "policy has {} tokens, reference has {}",
                completion_tokens.len(),
                ref_tokens.len()
            )));
        }
        if let Some((i, (p, r))) = completion_tokens
            .iter()
            .zip(&ref_tokens)
            .enumerate()
            .find(|(_, (p, r))| p.token != r.token)
        {
            return Err(Error::Alignment(format!(
                "token {i} differs: policy '{}' vs reference '{}'",
                p.token, r.token
            )));
        }
        let mut prev = 0;
        for &b in &step_boundaries {
            if b <= prev {
                return Err(Error::Contract(format!(
                    "step boundaries must be strictly increasing and positive: {step_boundaries:?}"
                )));
            }
            prev = b;
        }
        if prev != completion_tokens.len() {
            return Err(Error::Contract(format!(
                "step boundaries {step_boundaries:?} do not cover {} tokens",
                completion_tokens.len()
            )));
        }
        Ok(Self {
            prompt: prompt.into(),
            completion_tokens,
            ref_tokens,
            step_boundaries,
        })
    }

    /// Builds a sequence from raw log-probabilities with synthetic token names.
    pub fn from_logprobs(
        policy: &[f64],
        reference: &[f64],
        step_boundaries: Vec<usize>,
    ) -> Result<Self> {
        let tok = |lps: &[f64]| {
            lps.iter()
                .enumerate()
                .map(|(i, &logprob)| TokenScore {
                    token: format!("t{i}"),
                    logprob,
                })
                .collect::<Vec<_>>()
        };
        Self::new("", tok(policy), tok(reference), step_boundaries)
    }

    pub fn len(&self) -> usize {
        self.completion_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completion_tokens.is_empty()
    }

    pub fn num_steps(&self) -> usize {
        self.step_boundaries.len()
    }

    /// Policy minus reference log-probability, per token.
    pub fn log_ratios(&self) -> impl Iterator<Item = f64> + '_ {
        self.completion_tokens
            .iter()
            .zip(&self.ref_tokens)
            .map(|(p, r)| p.logprob - r.logprob)
    }
}

fn strip_marks(s: &str) -> String {
    // SentencePiece and byte-level BPE space markers count as whitespace.
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != '\u{2581}' && *c != '\u{0120}' && *c != '\u{010A}')
        .collect()
}

/// Maps step texts onto token indices.
///
/// Tokens and steps are compared with whitespace removed; a token that
/// straddles a step end is assigned to the earlier step. Anything after the
/// last step (an end marker, a separator) joins the last step.
pub fn align_steps(tokens: &[String], steps: &[String]) -> Result<Vec<usize>> {
    if steps.is_empty() {
        return Err(Error::Contract("no steps to align".into()));
    }
    let mut ends = Vec::with_capacity(steps.len());
    let mut acc = 0usize;
    for s in steps {
        acc += strip_marks(s).chars().count();
        ends.push(acc);
    }
    let mut boundaries = Vec::with_capacity(steps.len());
    let mut consumed = 0usize;
    let mut ti = 0usize;
    for (si, &end) in ends.iter().enumerate() {
        while consumed < end {
            let Some(tok) = tokens.get(ti) else {
                return Err(Error::Alignment(format!(
                    "tokens exhausted before the end of step {si}"
                )));
            };
            consumed += strip_marks(tok).chars().count();
            ti += 1;
        }
        if boundaries.last().is_some_and(|&b| b >= ti) || ti == 0 {
            return Err(Error::Alignment(format!("step {si} maps to no tokens")));
        }
        boundaries.push(ti);
    }
    if let Some(last) = boundaries.last_mut() {
        *last = tokens.len();
    }
    Ok(boundaries)
}

/// Scores `steps` (joined by `joiner`) under policy and reference.
///
/// With `terminal`, the model's end marker is appended so the sequence is a
/// complete response.
pub fn score_steps(
    policy: &dyn LanguageModel,
    reference: &dyn LanguageModel,
    prompt: &str,
    steps: &[String],
    joiner: &str,
    terminal: bool,
) -> Result<ScoredSequence> {
    let mut completion = steps.join(joiner);
    if terminal {
        if let Some(end) = policy.end_marker() {
            completion.push(' ');
            completion.push_str(end);
        }
    }
    let pol = policy.score(prompt, &completion)?;
    let reff = reference.score(prompt, &completion)?;
    let tokens: Vec<String> = pol.iter().map(|t| t.token.clone()).collect();
    let mut texts: Vec<String> = Vec::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        // the joiner is charged to the step it precedes
        if i == 0 {
            texts.push(s.clone());
        } else {
            texts.push(format!("{joiner}{s}"));
        }
    }
    let boundaries = align_steps(&tokens, &texts)?;
    ScoredSequence::new(prompt, pol, reff, boundaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn alignment_rejects_mismatch() {
        let a = vec![TokenScore {
            token: "x".into(),
            logprob: -1.0,
        }];
        let b = vec![TokenScore {
            token: "y".into(),
            logprob: -1.0,
        }];
        assert!(matches!(
            ScoredSequence::new("", a.clone(), b, vec![1]),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            ScoredSequence::new("", a.clone(), vec![], vec![1]),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            ScoredSequence::new("", a.clone(), a.clone(), vec![]),
            Err(Error::Contract(_))
        ));
        assert!(ScoredSequence::new("", a.clone(), a, vec![1]).is_ok());
    }

    #[test]
    fn boundaries_must_increase() {
        assert!(ScoredSequence::from_logprobs(&[0.0; 3], &[0.0; 3], vec![2, 2, 3]).is_err());
        assert!(ScoredSequence::from_logprobs(&[0.0; 3], &[0.0; 3], vec![1, 2]).is_err());
        assert!(ScoredSequence::from_logprobs(&[0.0; 3], &[0.0; 3], vec![1, 3]).is_ok());
    }

    #[test]
    fn align_word_tokens() {
        let tokens = s(&["E5", "r1", "E17", ";", "E17", "r2", "E40", "$"]);
        let steps = s(&["E5 r1 E17", " ; E17 r2 E40"]);
        assert_eq!(align_steps(&tokens, &steps).unwrap(), vec![3, 8]);
    }

    #[test]
    fn align_subword_tokens() {
        let tokens = s(&[
            "\u{2581}Step",
            "\u{2581}1",
            ":",
            "\u{2581}go",
            ".",
            "\n",
            "Step",
            " 2",
            ":",
            " stop.",
        ]);
        let steps = s(&["Step 1: go.", "\nStep 2: stop."]);
        assert_eq!(align_steps(&tokens, &steps).unwrap(), vec![5, 10]);
    }

    #[test]
    fn align_detects_short_tokens() {
        let tokens = s(&["ab"]);
        assert!(align_steps(&tokens, &s(&["ab", "cd"])).is_err());
    }
}
