//! Toy-mode wiring: pair generation, training of both PRMs, and engine
//! construction from a trained bundle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundry::{
    self, cot_vocabulary, kg_vocabulary, FoundryConfig, Modality, PreferencePair, QaExample,
};
use crate::kg::Graph;
use crate::lm::{LanguageModel, Tokenizer, ToyLm};
use crate::reasoning::Prms;
use crate::train::{self, Datasets, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub kg_order: usize,
    pub kg_max_len: usize,
    pub cot_order: usize,
    pub cot_max_len: usize,
    /// Longest CoT the CoT vocabulary covers.
    pub max_steps: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            kg_order: 2,
            kg_max_len: 24,
            cot_order: 2,
            cot_max_len: 48,
            max_steps: 6,
        }
    }
}

impl ToyModelConfig {
    pub fn kg_model(&self, graph: &Graph) -> Result<ToyLm> {
        ToyLm::new(
            kg_vocabulary(graph),
            self.kg_order,
            self.kg_max_len,
            Tokenizer::Words,
        )
    }

    pub fn cot_model(&self, graph: &Graph) -> Result<ToyLm> {
        ToyLm::new(
            cot_vocabulary(graph, self.max_steps),
            self.cot_order,
            self.cot_max_len,
            Tokenizer::Words,
        )
    }
}

/// Native pairs of both modalities.
pub fn generate_all_pairs(
    graph: &Graph,
    examples: &[QaExample],
    config: &FoundryConfig,
    seed: u64,
) -> Vec<PreferencePair> {
    let mut pairs = foundry::generate_pairs(graph, examples, Modality::Kg, config, seed);
    pairs.extend(foundry::generate_pairs(
        graph,
        examples,
        Modality::Cot,
        config,
        seed,
    ));
    pairs
}

/// Splits native pairs by modality and adds the cross-modal conversions.
pub fn datasets_from(pairs: &[PreferencePair]) -> Datasets {
    let (kg, cot): (Vec<PreferencePair>, Vec<PreferencePair>) = pairs
        .iter()
        .filter(|p| p.origin == foundry::Origin::Native)
        .cloned()
        .partition(|p| p.modality == Modality::Kg);
    Datasets {
        kg_from_cot: foundry::convert_pairs(&cot),
        cot_from_kg: foundry::convert_pairs(&kg),
        kg,
        cot,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmModels {
    pub policy: ToyLm,
    pub reference: ToyLm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_only: Option<ToyLm>,
    pub report: TrainReport,
}

impl PrmModels {
    /// The policy to use, falling back to the final one when no
    /// initialization snapshot exists.
    pub fn policy_for(&self, cotrained: bool) -> &ToyLm {
        if cotrained {
            &self.policy
        } else {
            self.init_only.as_ref().unwrap_or(&self.policy)
        }
    }
}

/// Both trained PRMs, as written by the `train` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmBundle {
    pub models: ToyModelConfig,
    pub kg: PrmModels,
    pub cot: PrmModels,
}

impl PrmBundle {
    pub fn prms(&self, cotrained: bool) -> Prms<'_> {
        Prms {
            kg_policy: self.kg.policy_for(cotrained) as &dyn LanguageModel,
            kg_reference: &self.kg.reference,
            cot_policy: self.cot.policy_for(cotrained),
            cot_reference: &self.cot.reference,
        }
    }
}

fn train_one(
    start: ToyLm,
    modality: Modality,
    datasets: &Datasets,
    config: &TrainConfig,
) -> Result<PrmModels> {
    let out = train::train(&start, modality, datasets, config)?;
    Ok(PrmModels {
        policy: out.model,
        reference: start,
        init_only: out.init_only,
        report: out.report,
    })
}

/// Trains the KG-PRM and the CoT-PRM from fresh uniform models.
pub fn train_bundle(
    graph: &Graph,
    pairs: &[PreferencePair],
    models: &ToyModelConfig,
    config: &TrainConfig,
) -> Result<PrmBundle> {
    if graph.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let datasets = datasets_from(pairs);
    let kg_start = models.kg_model(graph)?;
    let cot_start = models.cot_model(graph)?;
    let (kg, cot) = rayon::join(
        || train_one(kg_start, Modality::Kg, &datasets, config),
        || train_one(cot_start, Modality::Cot, &datasets, config),
    );
    Ok(PrmBundle {
        models: models.clone(),
        kg: kg?,
        cot: cot?,
    })
}
