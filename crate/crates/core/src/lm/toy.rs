//! Tabular autoregressive toy model.
//!
//! Each context (the last `order` tokens of prompt plus completion) owns a
//! row of logits over the vocabulary; missing rows are all-zero, i.e.
//! uniform. The end marker `$` is forced at position `max_len`, so every
//! completion terminates and the whole completion tree can be enumerated.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LanguageModel, SampleParams, TokenScore};
use crate::error::{Error, Result};

pub const END_TOKEN: &str = "$";
const UNK_NAME: &str = "<unk>";
const BOS_NAME: &str = "<bos>";

/// Enumeration guard on the number of completion leaves.
pub const MAX_ENUMERATION_LEAVES: usize = 1_000_000;

/// Temperatures at or below this sample greedily.
const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenizer {
    /// One token per non-whitespace character.
    Chars,
    /// Whitespace-separated words; trailing `.,?!` split off as tokens.
    Words,
}

/// One scored position: the context row, the emitted token, and whether the
/// end marker was forced there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub context: Vec<u32>,
    pub token: u32,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    end: u32,
    order: usize,
    max_len: usize,
    tokenizer: Tokenizer,
    rows: BTreeMap<Vec<u32>, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ToyLmRepr {
    vocab: Vec<String>,
    order: usize,
    max_len: usize,
    tokenizer: Tokenizer,
    rows: Vec<(Vec<String>, Vec<f64>)>,
}

impl Serialize for ToyLm {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let rows = self
            .rows
            .iter()
            .map(|(ctx, row)| {
                (
                    ctx.iter()
                        .map(|&id| self.context_name(id).to_string())
                        .collect(),
                    row.clone(),
                )
            })
            .collect();
        ToyLmRepr {
            vocab: self.vocab.clone(),
            order: self.order,
            max_len: self.max_len,
            tokenizer: self.tokenizer,
            rows,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ToyLm {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = ToyLmRepr::deserialize(deserializer)?;
        let mut lm = ToyLm::new(repr.vocab, repr.order, repr.max_len, repr.tokenizer)
            .map_err(D::Error::custom)?;
        for (ctx, row) in repr.rows {
            let names: Vec<&str> = ctx.iter().map(String::as_str).collect();
            lm.set_row(&names, row).map_err(D::Error::custom)?;
        }
        Ok(lm)
    }
}

impl ToyLm {
    /// A uniform model. The vocabulary must contain the end marker `$`.
    pub fn new(
        vocab: Vec<String>,
        order: usize,
        max_len: usize,
        tokenizer: Tokenizer,
    ) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Contract("max_len must be positive".into()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Contract(format!("invalid vocabulary token '{tok}'")));
            }
            if tokenizer == Tokenizer::Chars && tok.chars().count() != 1 {
                return Err(Error::Contract(format!(
                    "char tokenizer needs single-char tokens, got '{tok}'"
                )));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Contract(format!(
                    "duplicate vocabulary token '{tok}'"
                )));
            }
        }
        let end = *index
            .get(END_TOKEN)
            .ok_or_else(|| Error::Contract("vocabulary must contain the end marker '$'".into()))?;
        Ok(Self {
            vocab,
            index,
            end,
            order,
            max_len,
            tokenizer,
            rows: BTreeMap::new(),
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.tokenizer
    }

    pub fn end_id(&self) -> u32 {
        self.end
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    fn unk(&self) -> u32 {
        self.vocab.len() as u32
    }

    fn bos(&self) -> u32 {
        self.vocab.len() as u32 + 1
    }

    fn context_name(&self, id: u32) -> &str {
        if id == self.unk() {
            UNK_NAME
        } else if id == self.bos() {
            BOS_NAME
        } else {
            &self.vocab[id as usize]
        }
    }

    fn context_id(&self, name: &str) -> Result<u32> {
        match name {
            UNK_NAME => Ok(self.unk()),
            BOS_NAME => Ok(self.bos()),
            _ => self
                .token_id(name)
                .ok_or_else(|| Error::Tokenization(format!("unknown context token '{name}'"))),
        }
    }

    /// Every context id, including the unknown and padding markers.
    pub fn context_alphabet(&self) -> Vec<u32> {
        (0..self.vocab.len() as u32 + 2).collect()
    }

    /// Stored logits rows, keyed by context ids.
    pub fn rows(&self) -> &BTreeMap<Vec<u32>, Vec<f64>> {
        &self.rows
    }

    /// Mutable row for `context`, materialized as zeros if absent.
    pub fn row_mut(&mut self, context: &[u32]) -> &mut Vec<f64> {
        let v = self.vocab.len();
        self.rows
            .entry(context.to_vec())
            .or_insert_with(|| vec![0.0; v])
    }

    /// Sets the logits of a context given by token names (`<unk>`/`<bos>`
    /// name the special context ids).
    pub fn set_row(&mut self, context: &[&str], logits: Vec<f64>) -> Result<()> {
        if context.len() != self.order {
            return Err(Error::Contract(format!(
                "context has {} tokens, model order is {}",
                context.len(),
                self.order
            )));
        }
        if logits.len() != self.vocab.len() {
            return Err(Error::Contract(format!(
                "row has {} logits, vocabulary has {}",
                logits.len(),
                self.vocab.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("logits must be finite".into()));
        }
        let ids = context
            .iter()
            .map(|n| self.context_id(n))
            .collect::<Result<Vec<_>>>()?;
        self.rows.insert(ids, logits);
        Ok(())
    }

    /// Fills every context row with logits drawn uniformly from `[-scale, scale]`.
    pub fn randomize<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        let alphabet = self.context_alphabet();
        let mut contexts: Vec<Vec<u32>> = vec![Vec::new()];
        for _ in 0..self.order {
            contexts = contexts
                .into_iter()
                .flat_map(|c| {
                    alphabet.iter().map(move |&a| {
                        let mut c = c.clone();
                        c.push(a);
                        c
                    })
                })
                .collect();
        }
        let v = self.vocab.len();
        for ctx in contexts {
            let row: Vec<f64> = (0..v).map(|_| rng.random_range(-scale..=scale)).collect();
            self.rows.insert(ctx, row);
        }
    }

    fn split_word<'a>(&self, word: &'a str) -> Vec<&'a str> {
        if self.index.contains_key(word) {
            return vec![word];
        }
        let mut core = word;
        let mut trailing = Vec::new();
        while let Some(c) = core.chars().last() {
            if core.len() > c.len_utf8() && matches!(c, '.' | ',' | '?' | '!') {
                let cut = core.len() - c.len_utf8();
                trailing.push(&core[cut..]);
                core = &core[..cut];
                if self.index.contains_key(core) {
                    break;
                }
            } else {
                break;
            }
        }
        let mut out = vec![core];
        out.extend(trailing.into_iter().rev());
        out
    }

    fn pieces<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self.tokenizer {
            Tokenizer::Chars => text
                .char_indices()
                .filter(|(_, c)| !c.is_whitespace())
                .map(|(i, c)| &text[i..i + c.len_utf8()])
                .collect(),
            Tokenizer::Words => text
                .split_whitespace()
                .flat_map(|w| self.split_word(w))
                .collect(),
        }
    }

    /// Completion tokens; anything outside the vocabulary is an error.
    pub fn tokenize_completion(&self, text: &str) -> Result<Vec<u32>> {
        self.pieces(text)
            .into_iter()
            .map(|p| {
                self.token_id(p).ok_or_else(|| {
                    Error::Tokenization(format!("token '{p}' is not in the vocabulary"))
                })
            })
            .collect()
    }

    /// Prompt tokens; out-of-vocabulary pieces map to the unknown context id.
    pub fn tokenize_prompt(&self, text: &str) -> Vec<u32> {
        self.pieces(text)
            .into_iter()
            .map(|p| self.token_id(p).unwrap_or(self.unk()))
            .collect()
    }

    pub fn render(&self, ids: &[u32]) -> String {
        let toks = ids.iter().map(|&i| self.token(i));
        match self.tokenizer {
            Tokenizer::Chars => toks.collect(),
            Tokenizer::Words => toks.collect::<Vec<_>>().join(" "),
        }
    }

    fn context_at(&self, prompt: &[u32], completion: &[u32], pos: usize) -> Vec<u32> {
        let mut ctx = vec![self.bos(); self.order];
        let total = prompt.len() + pos;
        for k in 0..self.order {
            // ctx[order-1-k] is the token k+1 places before position `pos`
            if k < total {
                let idx = total - 1 - k;
                let tok = if idx < prompt.len() {
                    prompt[idx]
                } else {
                    completion[idx - prompt.len()]
                };
                ctx[self.order - 1 - k] = tok;
            }
        }
        ctx
    }

    /// Log-softmax of the row for `context`.
    pub fn log_probs(&self, context: &[u32]) -> Vec<f64> {
        match self.rows.get(context) {
            Some(row) => log_softmax(row),
            None => vec![-(self.vocab.len() as f64).ln(); self.vocab.len()],
        }
    }

    /// Softmax of the row for `context`.
    pub fn probs(&self, context: &[u32]) -> Vec<f64> {
        self.log_probs(context).into_iter().map(f64::exp).collect()
    }

    fn forced_end(&self, pos: usize) -> bool {
        pos + 1 >= self.max_len
    }

    /// Positions visited while emitting `completion` after `prompt`.
    pub fn visits(&self, prompt: &[u32], completion: &[u32]) -> Result<Vec<Visit>> {
        if completion.len() > self.max_len {
            return Err(Error::Contract(format!(
                "completion has {} tokens, max_len is {}",
                completion.len(),
                self.max_len
            )));
        }
        if let Some(p) = completion.iter().position(|&t| t == self.end) {
            if p + 1 != completion.len() {
                return Err(Error::Contract("end marker must be the last token".into()));
            }
        }
        completion
            .iter()
            .enumerate()
            .map(|(pos, &token)| {
                let forced = self.forced_end(pos);
                if forced && token != self.end {
                    return Err(Error::Contract(format!(
                        "position {} must be the end marker (max_len {})",
                        pos + 1,
                        self.max_len
                    )));
                }
                Ok(Visit {
                    context: self.context_at(prompt, completion, pos),
                    token,
                    forced,
                })
            })
            .collect()
    }

    /// Conditional log-probabilities of each completion token.
    pub fn token_logprobs(&self, prompt: &[u32], completion: &[u32]) -> Result<Vec<f64>> {
        Ok(self
            .visits(prompt, completion)?
            .into_iter()
            .map(|v| {
                if v.forced {
                    0.0
                } else {
                    self.log_probs(&v.context)[v.token as usize]
                }
            })
            .collect())
    }

    fn next_distribution(&self, prompt: &[u32], completion: &[u32]) -> Vec<f64> {
        let pos = completion.len();
        if self.forced_end(pos) {
            let mut p = vec![0.0; self.vocab.len()];
            p[self.end as usize] = 1.0;
            return p;
        }
        self.probs(&self.context_at(prompt, completion, pos))
    }

    /// Exact enumeration of every terminating continuation of `prefix`,
    /// as (token ids, log-probability).
    pub fn enumerate_ids(&self, prompt: &[u32], prefix: &[u32]) -> Result<Vec<(Vec<u32>, f64)>> {
        self.visits(prompt, prefix)?;
        if prefix.last() == Some(&self.end) {
            return Ok(vec![(Vec::new(), 0.0)]);
        }
        let mut out = Vec::new();
        let mut seq = prefix.to_vec();
        self.enumerate_rec(prompt, &mut seq, prefix.len(), 0.0, &mut out)?;
        Ok(out)
    }

    fn enumerate_rec(
        &self,
        prompt: &[u32],
        seq: &mut Vec<u32>,
        start: usize,
        logp: f64,
        out: &mut Vec<(Vec<u32>, f64)>,
    ) -> Result<()> {
        let pos = seq.len();
        let candidates: Vec<(u32, f64)> = if self.forced_end(pos) {
            vec![(self.end, 0.0)]
        } else {
            let ctx = self.context_at(prompt, seq, pos);
            self.log_probs(&ctx)
                .into_iter()
                .enumerate()
                .map(|(i, lp)| (i as u32, lp))
                .collect()
        };
        for (tok, lp) in candidates {
            seq.push(tok);
            if tok == self.end {
                if out.len() >= MAX_ENUMERATION_LEAVES {
                    return Err(Error::EnumerationTooLarge {
                        limit: MAX_ENUMERATION_LEAVES,
                    });
                }
                out.push((seq[start..].to_vec(), logp + lp));
            } else {
                self.enumerate_rec(prompt, seq, start, logp + lp, out)?;
            }
            seq.pop();
        }
        Ok(())
    }

    fn sample_one(
        &self,
        prompt: &[u32],
        temperature: f64,
        max_tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<u32> {
        let mut seq = Vec::new();
        loop {
            let dist = self.next_distribution(prompt, &seq);
            let tok = if temperature <= GREEDY_TEMPERATURE {
                argmax(&dist)
            } else {
                // p^(1/T), renormalized
                let weights: Vec<f64> = dist
                    .iter()
                    .map(|&p| {
                        if p > 0.0 {
                            (p.ln() / temperature).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                pick as u32
            };
            seq.push(tok);
            if tok == self.end || seq.len() >= max_tokens {
                return seq;
            }
        }
    }
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u32
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

impl LanguageModel for ToyLm {
    fn score(&self, prompt: &str, completion: &str) -> Result<Vec<TokenScore>> {
        let p = self.tokenize_prompt(prompt);
        let c = self.tokenize_completion(completion)?;
        if c.is_empty() {
            return Err(Error::Tokenization("completion has no tokens".into()));
        }
        let lps = self.token_logprobs(&p, &c)?;
        Ok(c.iter()
            .zip(lps)
            .map(|(&id, logprob)| TokenScore {
                token: self.token(id).to_string(),
                logprob,
            })
            .collect())
    }

    fn sample(&self, prompt: &str, params: &SampleParams) -> Result<Vec<String>> {
        if params.n == 0 {
            return Err(Error::Contract("n must be at least 1".into()));
        }
        if params.temperature < 0.0 || !params.temperature.is_finite() {
            return Err(Error::Contract(format!(
                "invalid temperature {}",
                params.temperature
            )));
        }
        let p = self.tokenize_prompt(prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let limit = params.max_tokens.clamp(1, self.max_len);
        Ok((0..params.n)
            .map(|_| {
                let ids = self.sample_one(&p, params.temperature, limit, &mut rng);
                let mut text = self.render(&ids);
                if let Some(cut) = params
                    .stop
                    .iter()
                    .filter_map(|s| text.find(s.as_str()))
                    .min()
                {
                    text.truncate(cut);
                }
                text
            })
            .collect())
    }

    fn end_marker(&self) -> Option<&str> {
        Some(END_TOKEN)
    }
}

/// Every terminating completion of `prefix` with its exact probability.
pub fn enumerate_completions(model: &ToyLm, prefix: &str) -> Result<Vec<(String, f64)>> {
    let ids = model.tokenize_completion(prefix)?;
    Ok(model
        .enumerate_ids(&[], &ids)?
        .into_iter()
        .map(|(c, lp)| (model.render(&c), lp.exp()))
        .collect())
}
