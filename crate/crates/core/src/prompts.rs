//! Prompt templates for the generator model.
//!
//! Placeholders are written `{name}`; [`render`] fails if any placeholder is
//! left unfilled.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub text: &'static str,
}

pub const KG_TRUE_SAMPLES: &str = "kg_true_samples";
pub const KG_FALSE_SAMPLES: &str = "kg_false_samples";
pub const COT_TRUE_SAMPLES: &str = "cot_true_samples";
pub const COT_FALSE_SAMPLES: &str = "cot_false_samples";
pub const KG_TO_COT: &str = "kg_to_cot";
pub const COT_TO_KG: &str = "cot_to_kg";
pub const KG_PATH_STEP: &str = "kg_path_step";
pub const COT_STEP: &str = "cot_step";
pub const FINAL_HARD: &str = "final_hard";
pub const FINAL_SOFT: &str = "final_soft";

static TEMPLATES: &[PromptTemplate] = &[
    PromptTemplate {
        name: KG_TRUE_SAMPLES,
        text: "Question: {question}\nAnswer: {answer}\n\
Using only triples from the knowledge graph below, write a path that starts at an entity of the question and ends at the answer. \
Write one triple per line as `head | relation | tail`; each triple must start where the previous one ended.\n\
Knowledge graph:\n{triples}\nPath:\n",
    },
    PromptTemplate {
        name: KG_FALSE_SAMPLES,
        text: "Question: {question}\nCorrect path:\n{path}\n\
Rewrite the path with exactly one error of this kind: {kind}.\n\
factual: one entity in a triple is wrong. logical: one relation in a triple is wrong. \
break: two adjacent triples no longer connect.\n\
Write one triple per line as `head | relation | tail`.\nPath:\n",
    },
    PromptTemplate {
        name: COT_TRUE_SAMPLES,
        text: "Question: {question}\nAnswer: {answer}\n\
Reason step by step until you reach the answer. Write each step on its own line as `Step k: ...` \
and finish the last step with `The answer is <answer>.`\n",
    },
    PromptTemplate {
        name: COT_FALSE_SAMPLES,
        text: "Question: {question}\nCorrect reasoning:\n{cot}\n\
Rewrite the reasoning with exactly one flaw of this kind: {kind}.\n\
factual: a step states wrong content. skip: a needed step is left out. \
redundant: add a step unrelated to the question.\n\
Keep the `Step k: ...` format.\n",
    },
    PromptTemplate {
        name: KG_TO_COT,
        text: "Question: {question}\nKnowledge-graph path:\n{path}\n\
Turn each triple into one reasoning step, in order. Write each step on its own line as `Step k: ...`.\nSteps:\n",
    },
    PromptTemplate {
        name: COT_TO_KG,
        text: "Question: {question}\nReasoning steps:\n{cot}\n\
Extract one knowledge-graph triple from each step and connect them into a path. \
Write one triple per line as `head | relation | tail`.\nTriples:\n",
    },
    PromptTemplate {
        name: KG_PATH_STEP,
        text: "Question: {question}\nPrevious reasoning step: {previous_step}\nCandidate triples:\n{triples}\n\
Choose the one triple that best continues the reasoning toward the answer. Its head must be an entity from the \
previous step: if only its tail qualifies, swap head and tail and prefix the relation with `~`.\n\
Reply with the triple only, as `head | relation | tail`.\nTriple:",
    },
    PromptTemplate {
        name: COT_STEP,
        text: "Question: {question}\nRelevant fact: {fact}\nReasoning so far:\n{cot}\n\
Write the next reasoning step using the fact. If this step reaches the final answer, end it with \
`The answer is <answer>.`\nStep {step}:",
    },
    PromptTemplate {
        name: FINAL_HARD,
        text: "Question: {question}\nReasoning:\n{cot}\nFacts:\n{facts}\n\
Give the final answer only. Separate multiple answers with `; `.\n",
    },
    PromptTemplate {
        name: FINAL_SOFT,
        text: "Reasoning graph:\n{graph}\n",
    },
];

pub fn templates() -> &'static [PromptTemplate] {
    TEMPLATES
}

pub fn template(name: &str) -> Result<&'static PromptTemplate> {
    TEMPLATES
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Contract(format!("no prompt template named '{name}'")))
}

/// Fills the placeholders of `template` from `values`.
pub fn render(template: &PromptTemplate, values: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.text.len());
    let mut rest = template.text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| {
            Error::Contract(format!("unterminated placeholder in '{}'", template.name))
        })?;
        let key = &after[..close];
        let value = values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| {
                Error::Contract(format!(
                    "template '{}' needs a value for '{key}'",
                    template.name
                ))
            })?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn render_named(name: &str, values: &[(&str, &str)]) -> Result<String> {
    render(template(name)?, values)
}
