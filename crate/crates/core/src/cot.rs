//! Chain-of-thought sequences and the step grammar used in toy mode.
//!
//! A CoT renders as one `Step k: ...` line per step. Numbering is derived
//! when rendering, so inserting or deleting steps never leaves gaps. In toy
//! mode a step's content is `<head> <relation> <tail>.`, optionally followed
//! by `The answer is <entity>.`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::Triple;

pub const ANSWER_PREFIX: &str = "The answer is";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Cot {
    steps: Vec<String>,
}

impl Cot {
    pub fn new(steps: Vec<String>) -> Self {
        Self { steps }
    }

    pub fn steps(&self) -> &[String] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, content: String) {
        self.steps.push(content);
    }

    pub fn insert(&mut self, index: usize, content: String) {
        self.steps.insert(index, content);
    }

    pub fn remove(&mut self, index: usize) -> String {
        self.steps.remove(index)
    }

    pub fn set(&mut self, index: usize, content: String) {
        self.steps[index] = content;
    }

    pub fn last(&self) -> Option<&str> {
        self.steps.last().map(String::as_str)
    }

    /// `Step k: content`, 0-based index in, 1-based number out.
    pub fn step_line(&self, index: usize) -> String {
        step_line(index, &self.steps[index])
    }

    pub fn lines(&self) -> Vec<String> {
        (0..self.steps.len()).map(|i| self.step_line(i)).collect()
    }

    pub fn render(&self) -> String {
        self.lines().join("\n")
    }

    /// Parses rendered text. Lines without a `Step k:` prefix are kept whole.
    pub fn parse(text: &str) -> Cot {
        let steps = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| strip_step_prefix(l).to_string())
            .collect();
        Cot { steps }
    }
}

impl fmt::Display for Cot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

pub fn step_line(index: usize, content: &str) -> String {
    format!("Step {}: {}", index + 1, content)
}

fn strip_step_prefix(line: &str) -> &str {
    let Some(rest) = line.strip_prefix("Step ") else {
        return line;
    };
    match rest.split_once(':') {
        Some((num, content)) if !num.is_empty() && num.chars().all(|c| c.is_ascii_digit()) => {
            content.trim()
        }
        _ => line,
    }
}

/// Toy-grammar rendering of one triple: `head relation tail.`
pub fn triple_sentence(triple: &Triple) -> String {
    format!("{triple}.")
}

pub fn answer_sentence(answer: &str) -> String {
    format!("{ANSWER_PREFIX} {answer}.")
}

/// A parsed toy step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepParse {
    pub triple: Triple,
    pub answer: Option<String>,
}

/// Parses `head relation tail.` with an optional answer sentence.
pub fn parse_step(content: &str, step: usize) -> Result<StepParse> {
    let err = |message: String| Error::Extraction { step, message };
    let content = content.trim();
    let (fact, answer) = match content.find(ANSWER_PREFIX) {
        Some(pos) => {
            let ans = content[pos + ANSWER_PREFIX.len()..]
                .trim()
                .trim_end_matches('.')
                .trim();
            if ans.is_empty() || ans.contains(char::is_whitespace) {
                return Err(err(format!("malformed answer sentence in '{content}'")));
            }
            (content[..pos].trim(), Some(ans.to_string()))
        }
        None => (content, None),
    };
    let Some(fact) = fact.strip_suffix('.') else {
        return Err(err(format!("step must end with '.': '{content}'")));
    };
    let words: Vec<&str> = fact.split_whitespace().collect();
    if words.len() != 3 {
        return Err(err(format!(
            "expected `head relation tail.`, got '{content}'"
        )));
    }
    Ok(StepParse {
        triple: Triple::from_labels(words[0], words[1], words[2]),
        answer,
    })
}

/// Entities a step mentions under the toy grammar, in order of appearance.
pub fn step_entities(content: &str) -> Vec<String> {
    match parse_step(content, 0) {
        Ok(p) => {
            let mut out = vec![p.triple.head, p.triple.tail];
            if let Some(a) = p.answer {
                out.push(a);
            }
            out.dedup();
            out
        }
        Err(_) => Vec::new(),
    }
}

/// The answer named by an answer sentence anywhere in `text`.
pub fn extract_answer(text: &str) -> Option<String> {
    let pos = text.rfind(ANSWER_PREFIX)?;
    let rest = text[pos + ANSWER_PREFIX.len()..].trim_start();
    let end = rest.find('\n').unwrap_or(rest.len());
    let ans = rest[..end].trim().trim_end_matches('.').trim();
    (!ans.is_empty()).then(|| ans.to_string())
}
