//! Acceptance suite. Each criterion prints one PASS or FAIL line; the test
//! fails if any criterion does.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use dprm_core::eval::{f1, hit_at_1, run_eval, EvalReport, Variant};
use dprm_core::foundry::{
    self, corrupt_kg_path, mine_true_paths, Corruption, FoundryConfig, Modality, PreferencePair,
};
use dprm_core::generator::ToyGenerator;
use dprm_core::kg::{validate_path, KgPath};
use dprm_core::lm::ScoredSequence;
use dprm_core::pipeline::{self, PrmBundle, ToyModelConfig};
use dprm_core::reasoning::{best_of_n, Engine, ReasonConfig};
use dprm_core::retrieval::{normalize, Embedder, EmbeddingIndex, IdfWeights, BUILTIN_DIM};
use dprm_core::reward::{last_step_reward, sequence_reward, step_rewards, verify_proposition};
use dprm_core::synth::{self, SynthConfig, SynthKg};
use dprm_core::train::{self, gradient_check, margin_accuracy, Datasets, Phase, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

/// Planted graph large enough for 200 pairs of each kind.
fn medium_kg() -> SynthKg {
    synth::generate(&SynthConfig {
        layers: vec![80, 24, 8, 4],
        noise_triples: 80,
        test_questions: 80,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Dense planted graph for the trainer: every question trains, so held-out
/// pairs mostly reuse contexts seen in training.
fn dense_kg() -> SynthKg {
    synth::generate(&SynthConfig {
        layers: vec![40, 12, 6, 3],
        noise_triples: 40,
        test_questions: 0,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn proposition() -> Outcome {
    let t = Instant::now();
    let report = verify_proposition(50, 20_240_601).map_err(|e| e.to_string())?;
    let took = t.elapsed();
    check(
        report.cases.len() >= 50 && report.max_rel_err < 1e-9 && took < Duration::from_secs(10),
        format!(
            "{} instances, max rel err {:.2e}, {}",
            report.cases.len(),
            report.max_rel_err,
            secs(took)
        ),
    )
}

fn random_sequence(rng: &mut ChaCha8Rng) -> ScoredSequence {
    let len = rng.random_range(1..40);
    let pol: Vec<f64> = (0..len).map(|_| -rng.random_range(0.0..8.0)).collect();
    let refr: Vec<f64> = (0..len).map(|_| -rng.random_range(0.0..8.0)).collect();
    let steps = rng.random_range(1..=len);
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, len - 1, steps - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    cuts.push(len);
    ScoredSequence::from_logprobs(&pol, &refr, cuts).unwrap()
}

fn telescoping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut bad = 0;
    for _ in 0..1000 {
        let seq = random_sequence(&mut rng);
        let s = rng.random_range(0.01..2.0);
        let r = step_rewards(&seq, s).unwrap();
        let summed = r.step_rewards.iter().fold(0.0, |a, x| a + x);
        if summed != sequence_reward(&seq, s).unwrap() {
            bad += 1;
        }
    }
    check(bad == 0, format!("{bad} of 1000 sequences differ"))
}

fn kg_pairs(pairs: &[PreferencePair], n: usize) -> Vec<PreferencePair> {
    pairs
        .iter()
        .filter(|p| p.modality == Modality::Kg)
        .take(n)
        .cloned()
        .collect()
}

fn gradients(kg: &SynthKg, pairs: &[PreferencePair]) -> Outcome {
    let pairs = kg_pairs(pairs, 20);
    let base = ToyModelConfig::default().kg_model(&kg.graph).unwrap();
    let mut worst: f64 = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let mut pol = base.clone();
        pol.randomize(&mut ChaCha8Rng::seed_from_u64(i as u64), 1.0);
        let mut refm = base.clone();
        refm.randomize(&mut ChaCha8Rng::seed_from_u64(500 + i as u64), 1.0);
        worst = worst.max(gradient_check(&pol, &refm, p, 0.05, 1e-5).map_err(|e| e.to_string())?);
    }
    check(
        pairs.len() >= 20 && worst < 1e-5,
        format!("{} pairs, max rel err {worst:.2e}", pairs.len()),
    )
}

fn trainer() -> Outcome {
    let kg = dense_kg();
    let pairs = pipeline::generate_all_pairs(&kg.graph, &kg.train, &FoundryConfig::default(), 1);
    let data = Datasets {
        kg: kg_pairs(&pairs, 200),
        ..Datasets::default()
    };
    let n = data.kg.len();
    let held = data.kg.iter().filter(|p| train::is_held_out(p)).count();
    let cfg = TrainConfig {
        epochs: 50,
        seed: 1,
        schedule: vec![Phase::InitKg],
        ..TrainConfig::default()
    };
    let start = ToyModelConfig::default().kg_model(&kg.graph).unwrap();
    let t = Instant::now();
    let out = train::train(&start, Modality::Kg, &data, &cfg).map_err(|e| e.to_string())?;
    let took = t.elapsed();
    let losses = &out.report.phases[0].epoch_losses;
    let (first, last) = (losses[0], *losses.last().unwrap());
    let acc = out.report.margin_accuracy.unwrap_or(0.0);
    check(
        n == 200 && acc >= 0.95 && last < first && took < Duration::from_secs(60),
        format!(
            "{n} pairs ({held} held out), held-out accuracy {acc:.3}, loss {first:.4} -> {last:.4}, {} epochs, {}",
            losses.len(),
            secs(took)
        ),
    )
}

fn cotraining(kg: &SynthKg, pairs: &[PreferencePair]) -> Outcome {
    // fresh KG-derived CoT pairs from questions never trained on
    let fresh_kg = foundry::generate_pairs(
        &kg.graph,
        &kg.test,
        Modality::Kg,
        &FoundryConfig::default(),
        777,
    );
    let fresh: Vec<PreferencePair> = foundry::convert_pairs(&fresh_kg)
        .into_iter()
        .take(200)
        .collect();
    if fresh.len() < 200 {
        return Err(format!("only {} fresh pairs", fresh.len()));
    }
    let datasets = pipeline::datasets_from(pairs);
    let start = ToyModelConfig::default().cot_model(&kg.graph).unwrap();
    let mut lines = Vec::new();
    let mut all = true;
    for seed in 1..=3 {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let out =
            train::train(&start, Modality::Cot, &datasets, &cfg).map_err(|e| e.to_string())?;
        let init = out.init_only.as_ref().ok_or("no init-only snapshot")?;
        let a_co =
            margin_accuracy(&out.model, &start, &fresh, cfg.strength).map_err(|e| e.to_string())?;
        let a_init =
            margin_accuracy(init, &start, &fresh, cfg.strength).map_err(|e| e.to_string())?;
        all &= a_co > a_init;
        lines.push(format!("seed {seed}: {a_co:.3} vs {a_init:.3}"));
    }
    check(
        all,
        format!(
            "co-trained vs init-only on 200 fresh pairs: {}",
            lines.join(", ")
        ),
    )
}

fn oracle_top(index: &EmbeddingIndex, q: &[f64], m: usize) -> Vec<usize> {
    let q = normalize(q.to_vec());
    let scores: Vec<f64> = index
        .vectors()
        .iter()
        .map(|v| {
            let mut acc = 0.0;
            for (a, b) in q.iter().zip(v) {
                acc += a * b;
            }
            acc
        })
        .collect();
    let mut used = vec![false; scores.len()];
    (0..m.min(scores.len()))
        .map(|_| {
            let mut best: Option<usize> = None;
            for i in 0..scores.len() {
                if !used[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                    best = Some(i);
                }
            }
            used[best.unwrap()] = true;
            best.unwrap()
        })
        .collect()
}

fn retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let dim = 6;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for _ in 0..500 {
        if !rows.is_empty() && rng.random_bool(0.3) {
            let j = rng.random_range(0..rows.len());
            rows.push(rows[j].clone());
        } else {
            rows.push((0..dim).map(|_| rng.random_range(-2..=2) as f64).collect());
        }
    }
    let index =
        EmbeddingIndex::from_vectors(rows.clone(), (0..500).map(|i| i.to_string()).collect())
            .unwrap();
    let (mut mismatches, mut ties) = (0, 0);
    for k in 0..50 {
        let q: Vec<f64> = if k % 2 == 0 {
            rows[rng.random_range(0..500)].clone()
        } else {
            (0..dim).map(|_| rng.random_range(-2..=2) as f64).collect()
        };
        let m = rng.random_range(1..=40);
        let got = index.top_m(&q, m).unwrap();
        ties += got.windows(2).filter(|w| w[0].1 == w[1].1).count();
        if got.iter().map(|g| g.0).collect::<Vec<_>>() != oracle_top(&index, &q, m) {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0 && ties > 0,
        format!("50 queries over 500 rows, {mismatches} mismatches, {ties} tied neighbours"),
    )
}

fn best_of_n_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (mut wrong, mut moved) = (0, 0);
    for _ in 0..100 {
        let n = rng.random_range(1..=12);
        let cands: Vec<ScoredSequence> = (0..n).map(|_| random_sequence(&mut rng)).collect();
        let s = rng.random_range(0.01..1.0);
        let (w, _) = best_of_n(&cands, |c| last_step_reward(c, s)).unwrap();
        let raw: Vec<f64> = cands
            .iter()
            .map(|c| {
                let start = c
                    .step_boundaries
                    .len()
                    .checked_sub(2)
                    .map_or(0, |i| c.step_boundaries[i]);
                c.log_ratios().skip(start).sum()
            })
            .collect();
        let mut arg = 0;
        for i in 1..n {
            if raw[i] > raw[arg] {
                arg = i;
            }
        }
        wrong += usize::from(w != arg);
        let (w10, _) = best_of_n(&cands, |c| last_step_reward(c, 10.0 * s)).unwrap();
        moved += usize::from(w10 != w);
    }
    check(
        wrong == 0 && moved == 0,
        format!("100 sets, {wrong} disagree with rescoring, {moved} change under x10"),
    )
}

fn engine_hit(
    kg: &SynthKg,
    bundle: &PrmBundle,
    embedder: &Embedder,
    index: &EmbeddingIndex,
    n: usize,
    variant: Variant,
) -> EvalReport {
    let gen = ToyGenerator::new(&kg.graph);
    let engine = Engine {
        graph: &kg.graph,
        index,
        embedder,
        generator: &gen,
        prms: bundle.prms(variant.uses_cotraining()),
        config: variant.apply(&ReasonConfig {
            n_candidates: n,
            ..ReasonConfig::default()
        }),
    };
    run_eval(&engine, &kg.test, variant, None).unwrap()
}

fn end_to_end() -> Outcome {
    let t = Instant::now();
    let kg = synth::generate(&SynthConfig::default()).unwrap();
    let hops_ok = kg
        .test
        .iter()
        .all(|q| (2..=3).contains(&synth::question_hops(&q.question)));
    let pairs = pipeline::generate_all_pairs(&kg.graph, &kg.train, &FoundryConfig::default(), 1);
    let bundle = pipeline::train_bundle(
        &kg.graph,
        &pairs,
        &ToyModelConfig::default(),
        &TrainConfig {
            seed: 1,
            ..TrainConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let embedder = Embedder::Idf(IdfWeights::fit(&kg.graph, BUILTIN_DIM));
    let index = EmbeddingIndex::build(&kg.graph, &embedder).unwrap();
    let setup = t.elapsed();

    let t = Instant::now();
    let n8 = engine_hit(&kg, &bundle, &embedder, &index, 8, Variant::Full);
    let n8_time = t.elapsed();
    let t = Instant::now();
    let n1 = engine_hit(&kg, &bundle, &embedder, &index, 1, Variant::Full);
    let n1_time = t.elapsed();
    let t = Instant::now();
    let nb = engine_hit(&kg, &bundle, &embedder, &index, 8, Variant::NoBoth);
    let nb_time = t.elapsed();
    // each paired run is charged the shared training as well
    let limit = Duration::from_secs(600);
    let pair_a = setup + n8_time + n1_time;
    let pair_b = setup + n8_time + nb_time;
    check(
        kg.graph.entities().len() >= 200
            && kg.test.len() == 200
            && hops_ok
            && n8.hit_at_1 >= n1.hit_at_1
            && n8.hit_at_1 >= nb.hit_at_1
            && pair_a < limit
            && pair_b < limit,
        format!(
            "{} entities, {} questions; Hit@1 N=8 {:.3}, N=1 {:.3}, no_both {:.3}; paired runs {} and {}",
            kg.graph.entities().len(),
            kg.test.len(),
            n8.hit_at_1,
            n1.hit_at_1,
            nb.hit_at_1,
            secs(pair_a),
            secs(pair_b)
        ),
    )
}

fn corruption_validity() -> Outcome {
    let kg = synth::generate(&SynthConfig::default()).unwrap();
    let paths: Vec<KgPath> = kg
        .train
        .iter()
        .flat_map(|qa| mine_true_paths(&kg.graph, qa, 4, 1))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut lines = Vec::new();
    let mut all = true;
    for kind in Corruption::KG_KINDS {
        let (mut done, mut invalid, mut same) = (0, 0, 0);
        while done < 1000 {
            let path = &paths[rng.random_range(0..paths.len())];
            let Ok(bad) = corrupt_kg_path(path, &kg.graph, kind, rng.random()) else {
                continue;
            };
            done += 1;
            let r = validate_path(&kg.graph, &bad);
            invalid += usize::from(if kind == Corruption::Break {
                !r.connected
            } else {
                !r.grounded
            });
            same += usize::from(&bad == path);
        }
        all &= invalid == 1000 && same == 0;
        lines.push(format!("{kind} {invalid}/1000 invalid, {same} unchanged"));
    }
    check(all, lines.join("; "))
}

fn metrics() -> Outcome {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let results = [
        hit_at_1("The answer is Paris.", &s(&["Paris"])),
        !hit_at_1("The answer is Paris.", &s(&["London"])),
        hit_at_1("  PARIS ", &s(&["paris"])),
        f1(&s(&["x"]), &s(&["x"])) == 1.0,
        f1::<String, String>(&[], &s(&["x"])) == 0.0,
        f1(&s(&["a", "b"]), &s(&["b", "c"])) == 0.5,
    ];
    let passed = results.iter().filter(|r| **r).count();
    check(
        passed == results.len(),
        format!("{passed}/{} examples", results.len()),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let path = |n: &str| d.join(n).to_string_lossy().into_owned();
    std::fs::write(
        d.join("run.conf"),
        "synth.layers = 30,12,6,3\nsynth.noise_triples = 30\nsynth.test_questions = 5\n",
    )
    .unwrap();
    let conf = path("run.conf");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_dprm"))
            .args(args)
            .args(["--config", &conf])
            .env_remove("DPRM_GATEWAY_URL")
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!(
                "{args:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            ))
        }
    };
    run(&["synth", "--out-dir", &path("."), "--seed", "2"])?;
    run(&[
        "gen-pairs",
        "--graph",
        &path("graph.tsv"),
        "--dataset",
        &path("train.jsonl"),
        "--pairs-out",
        &path("pairs.jsonl"),
    ])?;
    for m in ["a.json", "b.json"] {
        run(&[
            "train",
            "--graph",
            &path("graph.tsv"),
            "--pairs",
            &path("pairs.jsonl"),
            "--model-out",
            &path(m),
            "--seed",
            "6",
        ])?;
    }
    let test = std::fs::read_to_string(d.join("test.jsonl")).unwrap();
    let q: serde_json::Value = serde_json::from_str(test.lines().next().unwrap()).unwrap();
    let q = q["question"].as_str().unwrap().to_string();
    for r in ["ra.json", "rb.json"] {
        run(&[
            "reason",
            "--graph",
            &path("graph.tsv"),
            "--model",
            &path("a.json"),
            "--question",
            &q,
            "--output",
            &path(r),
            "--seed",
            "6",
        ])?;
    }
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    let train_same = read("a.json") == read("b.json");
    let reason_same = read("ra.json") == read("rb.json");
    check(
        train_same && reason_same,
        format!("train identical: {train_same}, reason identical: {reason_same}"),
    )
}

#[test]
fn acceptance() {
    let kg = medium_kg();
    let pairs = pipeline::generate_all_pairs(&kg.graph, &kg.train, &FoundryConfig::default(), 1);
    let criteria: Vec<Criterion<'_>> = vec![
        ("step-value identity", Box::new(proposition)),
        ("telescoping", Box::new(telescoping)),
        ("gradient check", Box::new(|| gradients(&kg, &pairs))),
        ("trainer efficacy", Box::new(trainer)),
        ("co-training transfer", Box::new(|| cotraining(&kg, &pairs))),
        ("retrieval exactness", Box::new(retrieval)),
        ("best-of-N oracle", Box::new(best_of_n_oracle)),
        ("end-to-end screening", Box::new(end_to_end)),
        ("corruption validity", Box::new(corruption_validity)),
        ("metric examples", Box::new(metrics)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = Vec::new();
    // start below libtest's `test acceptance ...` prefix
    std::io::stdout().lock().write_all(b"\n").ok();
    for (name, run) in criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let line = match outcome {
            Ok(d) => format!("PASS {name}: {d} [{}]", secs(t.elapsed())),
            Err(d) => {
                failed.push(name);
                format!("FAIL {name}: {d} [{}]", secs(t.elapsed()))
            }
        };
        // straight to the handle so the verdicts survive output capture
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").and_then(|_| out.flush()).ok();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
