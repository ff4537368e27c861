//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use dprm_core::lm::{
    EmbedRequest, EmbedResponse, GatewayError, LanguageModel, LogprobsRequest, LogprobsResponse,
    SampleParams, SampleRequestBody, SampleResponse, Tokenizer, ToyLm, END_TOKEN,
};
use dprm_core::retrieval::Embedder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tiny_http::{Header, Response, Server};

/// Letters plus the end marker, char tokenizer.
pub fn toy(letters: &[&str], order: usize, max_len: usize) -> ToyLm {
    let mut vocab: Vec<String> = letters.iter().map(|s| s.to_string()).collect();
    vocab.push(END_TOKEN.to_string());
    ToyLm::new(vocab, order, max_len, Tokenizer::Chars).unwrap()
}

pub fn random_toy(letters: &[&str], order: usize, max_len: usize, seed: u64) -> ToyLm {
    let mut m = toy(letters, order, max_len);
    m.randomize(&mut ChaCha8Rng::seed_from_u64(seed), 2.0);
    m
}

/// In-process gateway serving toy models over the wire protocol.
pub struct MockGateway {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
    server: Arc<Server>,
    handle: Option<JoinHandle<()>>,
}

impl Drop for MockGateway {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn json_response<T: serde::Serialize>(status: u16, body: &T) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_data(serde_json::to_vec(body).unwrap())
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").unwrap())
}

fn error(status: u16, message: &str) -> Response<std::io::Cursor<Vec<u8>>> {
    json_response(
        status,
        &GatewayError {
            code: status,
            message: message.to_string(),
        },
    )
}

impl MockGateway {
    pub fn start(models: HashMap<String, ToyLm>) -> Self {
        Self::with_script(models, |_| None)
    }

    /// `script` answers `/sample` first; `None` falls through to the toy
    /// models.
    pub fn with_script<F>(models: HashMap<String, ToyLm>, script: F) -> Self
    where
        F: Fn(&SampleRequestBody) -> Option<Vec<String>> + Send + 'static,
    {
        let server = Arc::new(Server::http("127.0.0.1:0").unwrap());
        let url = format!("http://{}", server.server_addr().to_ip().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let (srv, count) = (server.clone(), requests.clone());
        let handle = std::thread::spawn(move || {
            let embedder = Embedder::Builtin { dim: 16 };
            for mut req in srv.incoming_requests() {
                count.fetch_add(1, Ordering::SeqCst);
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                let path = req.url().to_string();
                let resp = match path.as_str() {
                    "/healthz" => json_response(200, &serde_json::json!({ "status": "ok" })),
                    "/logprobs" => match serde_json::from_str::<LogprobsRequest>(&body) {
                        Err(e) => error(400, &e.to_string()),
                        Ok(r) => match models.get(&r.model) {
                            None => error(404, &format!("unknown model {}", r.model)),
                            Some(_) if r.completion.trim().is_empty() => json_response(
                                200,
                                &LogprobsResponse {
                                    tokens: vec![],
                                    logprobs: vec![],
                                },
                            ),
                            Some(m) => match m.score(&r.prompt, &r.completion) {
                                Ok(s) => json_response(
                                    200,
                                    &LogprobsResponse {
                                        tokens: s.iter().map(|t| t.token.clone()).collect(),
                                        logprobs: s.iter().map(|t| t.logprob).collect(),
                                    },
                                ),
                                Err(e) => error(422, &e.to_string()),
                            },
                        },
                    },
                    "/sample" => match serde_json::from_str::<SampleRequestBody>(&body) {
                        Err(e) => error(400, &e.to_string()),
                        Ok(r) => match (script(&r), models.get(&r.model)) {
                            (Some(c), _) => json_response(200, &SampleResponse { completions: c }),
                            (None, None) => error(404, &format!("unknown model {}", r.model)),
                            (None, Some(m)) => {
                                let params = SampleParams {
                                    n: r.n,
                                    stop: r.stop,
                                    temperature: r.temperature,
                                    seed: r.seed.unwrap_or(0),
                                    max_tokens: r.max_tokens,
                                };
                                match m.sample(&r.prompt, &params) {
                                    Ok(c) => json_response(200, &SampleResponse { completions: c }),
                                    Err(e) => error(422, &e.to_string()),
                                }
                            }
                        },
                    },
                    "/embed" => match serde_json::from_str::<EmbedRequest>(&body) {
                        Err(e) => error(400, &e.to_string()),
                        Ok(r) => json_response(
                            200,
                            &EmbedResponse {
                                vectors: embedder.embed(&r.texts).unwrap(),
                            },
                        ),
                    },
                    _ => error(404, "no such route"),
                };
                let _ = req.respond(resp);
            }
        });
        Self {
            url,
            requests,
            server,
            handle: Some(handle),
        }
    }
}

use dprm_core::foundry::{FoundryConfig, Modality, PreferencePair};
use dprm_core::pipeline::{self, PrmBundle, ToyModelConfig};
use dprm_core::synth::{self, SynthConfig, SynthKg};
use dprm_core::train::TrainConfig;

/// Small planted graph: 51 entities, 2-3 hop questions.
pub fn compact_kg(seed: u64) -> SynthKg {
    synth::generate(&SynthConfig {
        layers: vec![30, 12, 6, 3],
        noise_triples: 30,
        test_questions: 20,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn compact_pairs(kg: &SynthKg, seed: u64) -> Vec<PreferencePair> {
    pipeline::generate_all_pairs(&kg.graph, &kg.train, &FoundryConfig::default(), seed)
}

/// The first `n` native KG pairs.
pub fn kg_pairs(pairs: &[PreferencePair], n: usize) -> Vec<PreferencePair> {
    pairs
        .iter()
        .filter(|p| p.modality == Modality::Kg)
        .take(n)
        .cloned()
        .collect()
}

pub fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

pub fn compact_bundle(kg: &SynthKg, seed: u64) -> PrmBundle {
    let pairs = compact_pairs(kg, seed);
    pipeline::train_bundle(
        &kg.graph,
        &pairs,
        &ToyModelConfig::default(),
        &train_config(seed),
    )
    .unwrap()
}
