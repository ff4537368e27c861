//! Planted synthetic knowledge graphs with multi-hop questions.
//!
//! Entities sit in typed layers. Every entity outside the last layer has
//! exactly one chain edge into the next layer, so "the `r2` of the `r1` of
//! `E`" has a unique answer. Noise edges only point back into the first
//! layer, which keeps the chain the unique shortest route to any answer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundry::QaExample;
use crate::kg::{Graph, Triple};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Entities per layer; at least two layers.
    pub layers: Vec<usize>,
    /// Relation from layer `k` to layer `k + 1`.
    pub chain_relations: Vec<String>,
    pub noise_relations: Vec<String>,
    pub noise_triples: usize,
    /// Questions held out for testing.
    pub test_questions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            layers: vec![200, 80, 30, 12],
            chain_relations: ["mentor", "employer", "location"]
                .map(String::from)
                .to_vec(),
            noise_relations: ["knows", "admires", "cites", "met"]
                .map(String::from)
                .to_vec(),
            noise_triples: 240,
            test_questions: 200,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthKg {
    pub graph: Graph,
    pub train: Vec<QaExample>,
    pub test: Vec<QaExample>,
}

/// Hop count of a generated question.
pub fn question_hops(question: &str) -> usize {
    question.matches(" of ").count()
}

pub fn question_text(relations_outermost_first: &[&str], entity: &str) -> String {
    let mut q = String::from("What is");
    for r in relations_outermost_first {
        q.push_str(&format!(" the {r} of"));
    }
    format!("{q} {entity}?")
}

pub fn generate(config: &SynthConfig) -> Result<SynthKg> {
    let depth = config.layers.len();
    if depth < 2 || config.layers.contains(&0) {
        return Err(Error::Contract("need at least two non-empty layers".into()));
    }
    if config.chain_relations.len() != depth - 1 {
        return Err(Error::Contract(format!(
            "{} layers need {} chain relations",
            depth,
            depth - 1
        )));
    }
    if config.noise_triples > 0 && config.noise_relations.is_empty() {
        return Err(Error::Contract("noise triples need noise relations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total: usize = config.layers.iter().sum();
    let width = total.saturating_sub(1).to_string().len().max(3);
    let mut layers: Vec<Vec<String>> = Vec::with_capacity(depth);
    let mut next = 0;
    for &n in &config.layers {
        layers.push((next..next + n).map(|i| format!("E{i:0width$}")).collect());
        next += n;
    }

    // chain[k][i]: index in layer k+1 reached from entity i of layer k
    let mut chain: Vec<Vec<usize>> = Vec::with_capacity(depth - 1);
    let mut triples = Vec::new();
    for k in 0..depth - 1 {
        let targets = config.layers[k + 1];
        // cover every target first so no entity is unreachable
        let mut assign: Vec<usize> = (0..config.layers[k]).map(|i| i % targets).collect();
        assign.shuffle(&mut rng);
        for (i, &t) in assign.iter().enumerate() {
            triples.push(Triple::new(
                &layers[k][i],
                &config.chain_relations[k],
                &layers[k + 1][t],
            ));
        }
        chain.push(assign);
    }
    let all: Vec<&String> = layers.iter().flatten().collect();
    let mut noise = 0;
    let mut attempts = 0;
    while noise < config.noise_triples && attempts < config.noise_triples * 20 {
        attempts += 1;
        let h = all[rng.random_range(0..all.len())];
        let t = &layers[0][rng.random_range(0..config.layers[0])];
        if h == t {
            continue;
        }
        let r = &config.noise_relations[rng.random_range(0..config.noise_relations.len())];
        triples.push(Triple::new(h, r, t));
        noise += 1;
    }
    let graph = Graph::from_triples(triples);

    let follow = |start_layer: usize, start: usize, hops: usize| -> (Vec<&str>, String) {
        let mut rels = Vec::with_capacity(hops);
        let mut idx = start;
        for k in start_layer..start_layer + hops {
            rels.push(config.chain_relations[k].as_str());
            idx = chain[k][idx];
        }
        (rels, layers[start_layer + hops][idx].clone())
    };
    let make = |id: String, layer: usize, i: usize, hops: usize| {
        let (rels, answer) = follow(layer, i, hops);
        let outermost: Vec<&str> = rels.iter().rev().copied().collect();
        QaExample {
            id,
            question: question_text(&outermost, &layers[layer][i]),
            question_entities: vec![layers[layer][i].clone()],
            answers: vec![answer],
        }
    };

    let mut pool = Vec::new();
    for i in 0..config.layers[0] {
        for hops in [2, 3] {
            if hops < depth {
                pool.push(make(format!("q{i:04}h{hops}"), 0, i, hops));
            }
        }
    }
    pool.shuffle(&mut rng);
    let n_test = config.test_questions.min(pool.len());
    let test: Vec<QaExample> = pool.drain(..n_test).collect();
    let mut train = pool;
    if depth > 2 {
        for i in 0..config.layers[1] {
            train.push(make(format!("s{i:04}h2"), 1, i, 2.min(depth - 2)));
        }
    }
    let mut test = test;
    test.sort_by(|a, b| a.id.cmp(&b.id));
    train.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(SynthKg { graph, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foundry::mine_true_paths;

    #[test]
    fn planted_answers_are_unique_shortest_paths() {
        let kg = generate(&SynthConfig::default()).unwrap();
        assert!(kg.graph.entities().len() >= 200);
        assert_eq!(kg.test.len(), 200);
        for qa in kg.test.iter().chain(&kg.train) {
            let hops = question_hops(&qa.question);
            let paths = mine_true_paths(&kg.graph, qa, 4, 4);
            assert!(!paths.is_empty(), "{}", qa.question);
            assert!(paths.iter().all(|p| p.len() == hops), "{}", qa.question);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig {
            seed: 8,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.graph, c.graph);
    }

    #[test]
    fn question_shape() {
        assert_eq!(
            question_text(&["employer", "mentor"], "E005"),
            "What is the employer of the mentor of E005?"
        );
        assert_eq!(
            question_hops("What is the employer of the mentor of E005?"),
            2
        );
    }
}
