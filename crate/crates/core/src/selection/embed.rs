use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::Mutex;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::EmbeddingVector;
use crate::backend::http::{post_json, HttpTransport, RetryPolicy};
use crate::error::{Error, Result};

/// Maps texts to embeddings. Implementations must tolerate concurrent
/// calls.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

/// Deterministic bag-of-words embedder: each lowercase alphanumeric token
/// is hashed (FNV-1a) into one of `dim` buckets, and the count vector is
/// unit-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(HashingEmbedder { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn bucket(&self, token: &str) -> usize {
        let mut h = FnvHasher::default();
        h.write(token.as_bytes());
        (h.finish() % self.dim as u64) as usize
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut counts = vec![0.0; self.dim];
        let lowered = text.to_lowercase();
        let mut any = false;
        for token in lowered.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            counts[self.bucket(token)] += 1.0;
            any = true;
        }
        if !any {
            // Punctuation-only or empty text still needs a non-zero vector.
            counts[self.bucket(text.trim())] = 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        EmbeddingVector::new(counts.into_iter().map(|c| c / norm).collect()).expect("finite by construction")
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: 64 }
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Memoizes another embedder by exact text.
pub struct CachingEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<E: Embedder> CachingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        CachingEmbedder {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("embedding cache poisoned").len()
    }
}

impl<E: Embedder> Embedder for CachingEmbedder<E> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let missing: Vec<String> = {
            let cache = self.cache.lock().expect("embedding cache poisoned");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !cache.contains_key(*t) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing)?;
            if fresh.len() != missing.len() {
                return Err(Error::Embedding(format!(
                    "embedder returned {} vectors for {} texts",
                    fresh.len(),
                    missing.len()
                )));
            }
            let mut cache = self.cache.lock().expect("embedding cache poisoned");
            cache.extend(missing.into_iter().zip(fresh));
        }
        let cache = self.cache.lock().expect("embedding cache poisoned");
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpEmbedderConfig {
    pub base_url: String,
    pub model: String,
    pub batch_size: usize,
    pub timeout_secs: u64,
}

impl Default for HttpEmbedderConfig {
    fn default() -> Self {
        HttpEmbedderConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "paraphrase-MiniLM-L6-v2".into(),
            batch_size: 64,
            timeout_secs: 60,
        }
    }
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    transport: HttpTransport,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig, api_key: Option<String>) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("embedding batch_size must be positive".into()));
        }
        let transport = HttpTransport::new(api_key, config.timeout_secs, RetryPolicy::default(), 8)?;
        Ok(HttpEmbedder { config, transport })
    }

    fn url(&self) -> String {
        format!("{}/embeddings", self.config.base_url.trim_end_matches('/'))
    }
}

/// Parses an embeddings response body, ordering by each item's `index`.
pub(crate) fn parse_embeddings(body: &serde_json::Value, expected: usize) -> Result<Vec<EmbeddingVector>> {
    #[derive(Deserialize)]
    struct Item {
        embedding: Vec<f64>,
        #[serde(default)]
        index: Option<usize>,
    }
    #[derive(Deserialize)]
    struct Body {
        data: Vec<Item>,
    }
    let parsed: Body = serde_json::from_value(body.clone())
        .map_err(|e| Error::Embedding(format!("malformed embeddings response: {e}")))?;
    if parsed.data.len() != expected {
        return Err(Error::Embedding(format!(
            "expected {expected} embeddings, got {}",
            parsed.data.len()
        )));
    }
    let mut slots: Vec<Option<EmbeddingVector>> = vec![None; expected];
    for (pos, item) in parsed.data.into_iter().enumerate() {
        let at = item.index.unwrap_or(pos);
        if at >= expected || slots[at].is_some() {
            return Err(Error::Embedding(format!("bad embedding index {at}")));
        }
        slots[at] = Some(EmbeddingVector::new(item.embedding)?);
    }
    Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.config.batch_size) {
            let body = json!({ "model": self.config.model, "input": chunk });
            let response = post_json(&self.transport, &self.url(), &body)?;
            out.extend(parse_embeddings(&response, chunk.len())?);
        }
        Ok(out)
    }
}
