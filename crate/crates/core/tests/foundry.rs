//! Path mining against exhaustive search, and corruption validity sweeps.

use std::collections::HashSet;

use dprm_core::cot::parse_step;
use dprm_core::foundry::{
    corrupt_cot, corrupt_kg_path, distractor_pool, mine_true_paths, true_cot, Corruption, QaExample,
};
use dprm_core::kg::{validate_path, Graph, KgPath, Triple};
use dprm_core::synth::{self, SynthConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All simple forward paths of at most `max_hops` edges ending in an
/// answer, by depth-first search in load order.
fn exhaustive(graph: &Graph, qa: &QaExample, max_hops: usize) -> Vec<Vec<usize>> {
    fn go(
        graph: &Graph,
        here: &str,
        visited: &mut Vec<String>,
        steps: &mut Vec<usize>,
        answers: &HashSet<&str>,
        max_hops: usize,
        out: &mut Vec<Vec<usize>>,
    ) {
        if steps.len() == max_hops {
            return;
        }
        for (i, t) in graph.triples().iter().enumerate() {
            if t.head != here || visited.contains(&t.tail) {
                continue;
            }
            steps.push(i);
            if answers.contains(t.tail.as_str()) {
                out.push(steps.clone());
            }
            visited.push(t.tail.clone());
            go(graph, &t.tail, visited, steps, answers, max_hops, out);
            visited.pop();
            steps.pop();
        }
    }
    let answers: HashSet<&str> = qa.answers.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for e in &qa.question_entities {
        if graph.has_entity(e) {
            go(
                graph,
                e,
                &mut vec![e.clone()],
                &mut Vec::new(),
                &answers,
                max_hops,
                &mut out,
            );
        }
    }
    let Some(shortest) = out.iter().map(Vec::len).min() else {
        return Vec::new();
    };
    out.retain(|p| p.len() == shortest);
    out
}

fn random_graph(rng: &mut ChaCha8Rng, entities: usize, edges: usize) -> Graph {
    let rels = ["r", "s", "t"];
    Graph::from_triples((0..edges).map(|_| {
        Triple::new(
            format!("e{}", rng.random_range(0..entities)),
            rels[rng.random_range(0..rels.len())],
            format!("e{}", rng.random_range(0..entities)),
        )
    }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mining_returns_every_shortest_path(seed in any::<u64>(), entities in 3usize..10, edges in 1usize..30, hops in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_graph(&mut rng, entities, edges);
        let qa = QaExample {
            id: "q".into(),
            question: "?".into(),
            question_entities: vec![format!("e{}", rng.random_range(0..entities))],
            answers: vec![format!("e{}", rng.random_range(0..entities))],
        };
        let want: Vec<Vec<Triple>> = exhaustive(&graph, &qa, hops)
            .into_iter()
            .map(|p| p.into_iter().map(|i| graph.triples()[i].clone()).collect())
            .collect();
        let mut got: Vec<Vec<Triple>> = mine_true_paths(&graph, &qa, hops, usize::MAX)
            .into_iter()
            .map(|p| p.steps().to_vec())
            .collect();
        got.sort();
        let mut want_sorted = want.clone();
        want_sorted.sort();
        prop_assert_eq!(got, want_sorted);
        let capped = mine_true_paths(&graph, &qa, hops, 1);
        prop_assert!(capped.len() <= 1);
        for p in &capped {
            prop_assert!(validate_path(&graph, p).connected);
        }
    }
}

fn planted_paths() -> (Graph, Vec<KgPath>) {
    let kg = synth::generate(&SynthConfig::default()).unwrap();
    let paths: Vec<KgPath> = kg
        .train
        .iter()
        .flat_map(|qa| mine_true_paths(&kg.graph, qa, 4, 1))
        .collect();
    assert!(paths.iter().all(|p| p.len() >= 2));
    (kg.graph, paths)
}

#[test]
fn kg_corruptions_are_always_invalid() {
    let (graph, paths) = planted_paths();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for kind in Corruption::KG_KINDS {
        let mut done = 0;
        let mut tries = 0;
        while done < 1000 {
            tries += 1;
            assert!(tries < 5000, "{kind}: too few applicable corruptions");
            let path = &paths[rng.random_range(0..paths.len())];
            let Ok(bad) = corrupt_kg_path(path, &graph, kind, rng.random()) else {
                continue;
            };
            done += 1;
            assert_ne!(&bad, path, "{kind}");
            let report = validate_path(&graph, &bad);
            match kind {
                Corruption::Break => assert!(!report.connected, "{kind}: {bad:?}"),
                _ => assert!(!report.grounded, "{kind}: {bad:?}"),
            }
        }
    }
}

#[test]
fn cot_corruptions_change_the_chain() {
    let (graph, paths) = planted_paths();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for kind in Corruption::COT_KINDS {
        for _ in 0..300 {
            let path = &paths[rng.random_range(0..paths.len())];
            let good = true_cot(path);
            let seed = rng.random();
            let pool = distractor_pool(&graph, path, 8, seed);
            let bad = corrupt_cot(&good, &graph, &pool, kind, seed).unwrap();
            assert_ne!(bad, good);
            match kind {
                Corruption::Skip => assert_eq!(bad.len(), good.len() - 1),
                Corruption::Redundant => assert_eq!(bad.len(), good.len() + 1),
                _ => {
                    assert_eq!(bad.len(), good.len());
                    let false_facts = bad
                        .steps()
                        .iter()
                        .enumerate()
                        .filter(|(i, s)| !graph.contains(&parse_step(s, *i).unwrap().triple))
                        .count();
                    assert_eq!(false_facts, 1);
                }
            }
        }
    }
}

#[test]
fn corruption_needs_variety() {
    let graph = Graph::from_triples(vec![Triple::new("a", "r", "b")]);
    let path = KgPath::new(graph.triples().to_vec()).unwrap();
    assert!(corrupt_kg_path(&path, &graph, Corruption::Factual, 0).is_err());
}
