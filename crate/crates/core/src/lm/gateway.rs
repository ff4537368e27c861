//! HTTP client for the model gateway.
//!
//! Wire protocol (JSON over HTTP):
//!
//! ```text
//! POST /logprobs {model, prompt, completion}                      -> {tokens, logprobs}
//! POST /sample   {model, prompt, n, max_tokens, temperature, stop, seed?} -> {completions}
//! POST /embed    {texts}                                          -> {vectors}
//! GET  /healthz                                                   -> {status: "ok"}
//! ```
//!
//! Non-200 responses carry `{code, message}`.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{LanguageModel, SampleParams, TokenScore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobsRequest {
    pub model: String,
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobsResponse {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequestBody {
    pub model: String,
    pub prompt: String,
    pub n: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub stop: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResponse {
    pub completions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayError {
    pub code: u16,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Health {
    status: String,
}

/// Blocking gateway client; cheap to share across threads.
#[derive(Debug, Clone)]
pub struct GatewayClient {
    base_url: String,
    agent: ureq::Agent,
    retries: usize,
}

impl GatewayClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: config.into(),
            retries: 2,
        }
    }

    /// Transport-error retries per call (default 2).
    pub fn with_retries(mut self, retries: usize) -> Self {
        self.retries = retries;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn decode<T: DeserializeOwned>(mut resp: ureq::http::Response<ureq::Body>) -> Result<T> {
        let status = resp.status().as_u16();
        if status != 200 {
            let message = match resp.body_mut().read_json::<GatewayError>() {
                Ok(e) => e.message,
                Err(_) => format!("HTTP {status}"),
            };
            return Err(Error::Gateway {
                code: status,
                message,
            });
        }
        resp.body_mut()
            .read_json::<T>()
            .map_err(|e| Error::Transport(format!("malformed response body: {e}")))
    }

    fn with_retry<T>(
        &self,
        mut call: impl FnMut() -> std::result::Result<T, ureq::Error>,
    ) -> Result<T> {
        let mut last = None;
        for attempt in 0..=self.retries {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("gateway call failed (attempt {}): {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(Error::Transport(
            last.map(|e| e.to_string()).unwrap_or_default(),
        ))
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let url = format!("{}{path}", self.base_url);
        let resp = self.with_retry(|| self.agent.post(&url).send_json(body))?;
        Self::decode(resp)
    }

    pub fn health(&self) -> Result<bool> {
        let url = format!("{}/healthz", self.base_url);
        let resp = self.with_retry(|| self.agent.get(&url).call())?;
        let h: Health = Self::decode(resp)?;
        Ok(h.status == "ok")
    }

    pub fn logprobs(&self, req: &LogprobsRequest) -> Result<LogprobsResponse> {
        let resp: LogprobsResponse = self.post("/logprobs", req)?;
        if resp.tokens.len() != resp.logprobs.len() {
            return Err(Error::Transport(format!(
                "/logprobs returned {} tokens but {} logprobs",
                resp.tokens.len(),
                resp.logprobs.len()
            )));
        }
        Ok(resp)
    }

    pub fn sample(&self, req: &SampleRequestBody) -> Result<SampleResponse> {
        self.post("/sample", req)
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let resp: EmbedResponse = self.post(
            "/embed",
            &EmbedRequest {
                texts: texts.to_vec(),
            },
        )?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::Transport(format!(
                "/embed returned {} vectors for {} texts",
                resp.vectors.len(),
                texts.len()
            )));
        }
        Ok(resp.vectors)
    }

    /// A [`LanguageModel`] bound to one registered model name.
    pub fn model(&self, name: impl Into<String>) -> GatewayModel {
        GatewayModel {
            client: self.clone(),
            name: name.into(),
        }
    }

    /// Probes health and every endpoint, checking response shapes.
    pub fn conformance_check(&self, model: &str) -> ConformanceReport {
        let mut report = ConformanceReport::default();
        report.record(
            "healthz",
            self.health()
                .map(|ok| {
                    if ok {
                        String::from("status ok")
                    } else {
                        String::from("status not ok")
                    }
                })
                .and_then(|d| {
                    if d == "status ok" {
                        Ok(d)
                    } else {
                        Err(Error::Contract(d))
                    }
                }),
        );

        let lp = self.logprobs(&LogprobsRequest {
            model: model.to_string(),
            prompt: "Question: what is 1 + 1?".into(),
            completion: " The answer is 2.".into(),
        });
        report.record(
            "logprobs",
            lp.and_then(|r| {
                if r.tokens.is_empty() {
                    return Err(Error::Contract(
                        "no tokens for a non-empty completion".into(),
                    ));
                }
                if r.logprobs.iter().any(|x| !x.is_finite() || *x > 1e-6) {
                    return Err(Error::Contract(
                        "logprobs must be finite and non-positive".into(),
                    ));
                }
                Ok(format!("{} tokens", r.tokens.len()))
            }),
        );

        let empty = self.logprobs(&LogprobsRequest {
            model: model.to_string(),
            prompt: "Question: what is 1 + 1?".into(),
            completion: String::new(),
        });
        report.record(
            "logprobs-empty",
            empty.and_then(|r| {
                if r.tokens.is_empty() {
                    Ok("empty".into())
                } else {
                    Err(Error::Contract("empty completion produced tokens".into()))
                }
            }),
        );

        let sample = self.sample(&SampleRequestBody {
            model: model.to_string(),
            prompt: "Step 1:".into(),
            n: 2,
            max_tokens: 16,
            temperature: 0.0,
            stop: vec!["\n".into()],
            seed: Some(0),
        });
        report.record(
            "sample",
            sample.and_then(|r| {
                if r.completions.len() != 2 {
                    return Err(Error::Contract(format!(
                        "asked for 2 completions, got {}",
                        r.completions.len()
                    )));
                }
                if r.completions.iter().any(|c| c.contains('\n')) {
                    return Err(Error::Contract("stop string not honored".into()));
                }
                Ok("2 completions".into())
            }),
        );

        let texts = vec!["alpha beta".to_string(), "alpha beta".to_string()];
        report.record(
            "embed",
            self.embed(&texts).and_then(|v| {
                let dim = v[0].len();
                if dim == 0 || v.iter().any(|x| x.len() != dim) {
                    return Err(Error::Contract(
                        "vectors must share a positive dimension".into(),
                    ));
                }
                if v[0].iter().all(|x| *x == 0.0) {
                    return Err(Error::Contract("zero vector".into()));
                }
                if v[0] != v[1] {
                    return Err(Error::Contract(
                        "identical texts embedded differently".into(),
                    ));
                }
                Ok(format!("dim {dim}"))
            }),
        );

        let bad = self.logprobs(&LogprobsRequest {
            model: "__no_such_model__".into(),
            prompt: String::new(),
            completion: "x".into(),
        });
        report.record(
            "unknown-model",
            match bad {
                Err(Error::Gateway { code, .. }) => Ok(format!("error {code}")),
                Err(e) => Err(e),
                Ok(_) => Err(Error::Contract("unknown model accepted".into())),
            },
        );
        report
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConformanceCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub checks: Vec<ConformanceCheck>,
}

impl ConformanceReport {
    fn record(&mut self, name: &str, outcome: Result<String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(e) => (false, e.to_string()),
        };
        self.checks.push(ConformanceCheck {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// One named model behind a gateway.
#[derive(Debug, Clone)]
pub struct GatewayModel {
    client: GatewayClient,
    name: String,
}

impl GatewayModel {
    pub fn name(&self) -> &str {
        &self.name
    }
}

impl LanguageModel for GatewayModel {
    fn score(&self, prompt: &str, completion: &str) -> Result<Vec<TokenScore>> {
        let resp = self.client.logprobs(&LogprobsRequest {
            model: self.name.clone(),
            prompt: prompt.to_string(),
            completion: completion.to_string(),
        })?;
        Ok(resp
            .tokens
            .into_iter()
            .zip(resp.logprobs)
            .map(|(token, logprob)| TokenScore { token, logprob })
            .collect())
    }

    fn sample(&self, prompt: &str, params: &SampleParams) -> Result<Vec<String>> {
        let resp = self.client.sample(&SampleRequestBody {
            model: self.name.clone(),
            prompt: prompt.to_string(),
            n: params.n,
            max_tokens: params.max_tokens,
            temperature: params.temperature,
            stop: params.stop.clone(),
            seed: Some(params.seed),
        })?;
        if resp.completions.len() != params.n {
            return Err(Error::Transport(format!(
                "/sample returned {} completions, expected {}",
                resp.completions.len(),
                params.n
            )));
        }
        Ok(resp.completions)
    }
}
