//! Text embeddings and exact top-m triple retrieval by cosine similarity.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::Graph;
use crate::lm::GatewayClient;

pub const BUILTIN_DIM: usize = 256;

/// Embedding backend.
#[derive(Debug, Clone)]
pub enum Embedder {
    /// Signed hashed bag of lowercase tokens.
    Builtin {
        dim: usize,
    },
    /// Hashed bag of tokens with inverse-document-frequency weights.
    Idf(IdfWeights),
    Gateway(GatewayClient),
}

/// Smoothed IDF per token, fitted on the triple renderings of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfWeights {
    pub dim: usize,
    pub weights: BTreeMap<String, f64>,
    /// Weight of tokens never seen while fitting.
    pub unseen: f64,
}

impl IdfWeights {
    pub fn fit(graph: &Graph, dim: usize) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for t in graph.triples() {
            let toks: BTreeSet<String> =
                embedding_tokens(&t.embedding_text()).into_iter().collect();
            for tok in toks {
                *df.entry(tok).or_default() += 1;
            }
        }
        let n = graph.len() as f64;
        let idf = |d: f64| ((1.0 + n) / (1.0 + d)).ln() + 1.0;
        Self {
            dim,
            weights: df.into_iter().map(|(k, d)| (k, idf(d as f64))).collect(),
            unseen: idf(0.0),
        }
    }

    fn weight(&self, token: &str) -> f64 {
        self.weights.get(token).copied().unwrap_or(self.unseen)
    }
}

impl Default for Embedder {
    fn default() -> Self {
        Embedder::Builtin { dim: BUILTIN_DIM }
    }
}

/// Lowercase word pieces; `_` and `~` stay inside words.
pub fn embedding_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '~'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn builtin_vector(text: &str, dim: usize, weight: impl Fn(&str) -> f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for tok in embedding_tokens(text) {
        let mut h = FnvHasher::default();
        h.write(tok.as_bytes());
        let x = h.finish();
        let bucket = (x % dim as u64) as usize;
        let sign = if (x >> 63) & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign * weight(&tok);
    }
    v
}

/// Scales `v` to unit length; the zero vector becomes `e_0`.
pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        log::warn!("zero embedding replaced by the first basis vector");
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        return v;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

impl Embedder {
    /// Unit-normalized embeddings of `texts`.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Err(Error::Contract("nothing to embed".into()));
        }
        let raw = match self {
            Embedder::Builtin { dim } => {
                if *dim == 0 {
                    return Err(Error::Contract(
                        "embedding dimension must be positive".into(),
                    ));
                }
                texts
                    .iter()
                    .map(|t| builtin_vector(t, *dim, |_| 1.0))
                    .collect()
            }
            Embedder::Idf(w) => {
                if w.dim == 0 {
                    return Err(Error::Contract(
                        "embedding dimension must be positive".into(),
                    ));
                }
                texts
                    .iter()
                    .map(|t| builtin_vector(t, w.dim, |tok| w.weight(tok)))
                    .collect()
            }
            Embedder::Gateway(client) => client.embed(texts)?,
        };
        Ok(raw.into_iter().map(normalize).collect())
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed(&[text.to_string()])?.remove(0))
    }
}

/// One unit row per graph triple, in graph order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    dim: usize,
    vectors: Vec<Vec<f64>>,
    renderings: Vec<String>,
}

impl EmbeddingIndex {
    pub fn build(graph: &Graph, embedder: &Embedder) -> Result<Self> {
        let renderings: Vec<String> = graph.triples().iter().map(|t| t.embedding_text()).collect();
        let vectors = embedder.embed(&renderings)?;
        Self::from_vectors(vectors, renderings)
    }

    /// Index over precomputed rows; rows are normalized on the way in.
    pub fn from_vectors(vectors: Vec<Vec<f64>>, renderings: Vec<String>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Contract("empty index".into()));
        }
        if vectors.len() != renderings.len() {
            return Err(Error::Contract(format!(
                "{} vectors for {} renderings",
                vectors.len(),
                renderings.len()
            )));
        }
        let dim = vectors[0].len();
        if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Contract(
                "index rows must share a positive dimension".into(),
            ));
        }
        Ok(Self {
            dim,
            vectors: vectors.into_iter().map(normalize).collect(),
            renderings,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn renderings(&self) -> &[String] {
        &self.renderings
    }

    /// The `m` most similar rows, by descending cosine then ascending index.
    pub fn top_m(&self, query: &[f64], m: usize) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.dim {
            return Err(Error::Contract(format!(
                "query has dimension {}, index has {}",
                query.len(),
                self.dim
            )));
        }
        let q = normalize(query.to_vec());
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, dot(&q, v)))
            .collect();
        scored.sort_by(rank_order);
        scored.truncate(m);
        Ok(scored)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    // -0.0 and 0.0 are the same similarity and must fall through to index order
    let key = |x: f64| if x == 0.0 { 0.0 } else { x };
    key(b.1).total_cmp(&key(a.1)).then(a.0.cmp(&b.0))
}
