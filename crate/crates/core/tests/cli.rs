//! The `dprm` binary: the toy pipeline end to end, exit codes and
//! byte-identical reruns.

use std::path::Path;
use std::process::{Command, Output};

fn dprm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dprm"))
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("DPRM_GATEWAY_URL")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = dprm(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

const CONFIG: &str = "# compact run\n\
synth.layers = 30, 12, 6, 3\n\
synth.noise_triples = 30\n\
synth.test_questions = 12\n\
train.epochs = 8\n";

#[test]
fn toy_pipeline_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.conf"), CONFIG).unwrap();
    let conf = p(d, "run.conf");
    let c = ["--config", conf.as_str()];

    ok(&[
        &["synth", "--out-dir", &p(d, ".")][..],
        &c,
        &["--seed", "3"],
    ]
    .concat());
    let graph = p(d, "graph.tsv");
    let pairs = p(d, "pairs.jsonl");
    ok(&[
        &[
            "gen-pairs",
            "--graph",
            &graph,
            "--dataset",
            &p(d, "train.jsonl"),
            "--pairs-out",
            &pairs,
        ][..],
        &c,
    ]
    .concat());
    for name in ["m1.json", "m2.json"] {
        ok(&[
            &[
                "train",
                "--graph",
                &graph,
                "--pairs",
                &pairs,
                "--model-out",
                &p(d, name),
                "--seed",
                "4",
            ][..],
            &c,
        ]
        .concat());
    }
    let read = |name: &str| std::fs::read(d.join(name)).unwrap();
    assert_eq!(read("m1.json"), read("m2.json"));
    assert_eq!(read("m1.json.report.json"), read("m2.json.report.json"));
    assert!(d.join("m1.json.manifest.json").exists());

    let test = std::fs::read_to_string(d.join("test.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(test.lines().next().unwrap()).unwrap();
    let question = first["question"].as_str().unwrap();
    let model = p(d, "m1.json");
    for name in ["r1.json", "r2.json"] {
        ok(&[
            &[
                "reason",
                "--graph",
                &graph,
                "--model",
                &model,
                "--question",
                question,
                "--output",
                &p(d, name),
                "--seed",
                "5",
            ][..],
            &c,
        ]
        .concat());
    }
    assert_eq!(read("r1.json"), read("r2.json"));
    let r: serde_json::Value = serde_json::from_slice(&read("r1.json")).unwrap();
    assert!(r["answer"].is_string());
    assert!(!r["state"]["trace"].as_array().unwrap().is_empty());

    ok(&[
        &[
            "eval",
            "--graph",
            &graph,
            "--model",
            &model,
            "--dataset",
            &p(d, "test.jsonl"),
            "--output",
            &p(d, "eval.json"),
            "--variant",
            "no_iteration",
            "--trace-dir",
            &p(d, "traces"),
        ][..],
        &c,
    ]
    .concat());
    let e: serde_json::Value = serde_json::from_slice(&read("eval.json")).unwrap();
    assert_eq!(e["variant"], "no_iteration");
    let qs = e["questions"].as_array().unwrap();
    assert_eq!(qs.len(), 12);
    let mean = qs.iter().filter(|q| q["hit"].as_bool().unwrap()).count() as f64 / 12.0;
    assert!((e["hit_at_1"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert_eq!(std::fs::read_dir(d.join("traces")).unwrap().count(), 12);
}

#[test]
fn verify_prop1_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "prop.json");
    ok(&["verify-prop1", "--instances", "50", "--output", &out]);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-9);
    assert_eq!(v["cases"].as_array().unwrap().len(), 50);
}

#[test]
fn exit_codes() {
    assert_eq!(dprm(&[]).status.code(), Some(2));
    assert_eq!(dprm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dprm(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // a missing input file is a domain failure
    let missing = dprm(&[
        "gen-pairs",
        "--graph",
        &p(d, "nope.tsv"),
        "--dataset",
        &p(d, "nope.jsonl"),
        "--pairs-out",
        &p(d, "x.jsonl"),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    // an unknown config key is a usage failure
    std::fs::write(d.join("bad.conf"), "no.such.key = 1\n").unwrap();
    let bad = dprm(&["verify-prop1", "--config", &p(d, "bad.conf")]);
    assert_eq!(bad.status.code(), Some(2));
    // nothing listens on the discard port
    let down = dprm(&["serve-check", "--gateway-url", "http://127.0.0.1:9"]);
    assert_eq!(down.status.code(), Some(1));
}
