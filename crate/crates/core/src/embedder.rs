//! Text embeddings and cosine similarity.
//!
//! The reference embedder is a hashed bag of words: text is lowercased, split on
//! runs of non-alphanumeric characters, each token is hashed with 64-bit FNV-1a,
//! the hash modulo the dimension picks a bucket, bucket counts are accumulated
//! and the vector is L2-normalized. Token-free text maps to the all-zero vector.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIMENSION: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedError {
    #[error("embedding backend error (status {status:?}): {message}")]
    Backend {
        status: Option<u16>,
        message: String,
        retryable: bool,
    },
    #[error("embedder configuration error: {0}")]
    Config(String),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// A fixed-length embedding; either all-zero or unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dimension: usize) -> Self {
        Self(vec![0.0; dimension])
    }

    /// Builds a vector from raw values, normalizing to unit length unless all-zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = l2_norm(&values);
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        Self(values)
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity; 0.0 when either side is the zero vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dimension() != b.dimension() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dimension(),
            found: b.dimension(),
        });
    }
    let (mut dot, mut sq_a, mut sq_b) = (0.0, 0.0, 0.0);
    for (x, y) in a.0.iter().zip(&b.0) {
        dot += x * y;
        sq_a += x * x;
        sq_b += y * y;
    }
    if sq_a == 0.0 || sq_b == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (sq_a.sqrt() * sq_b.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Reference,
    Remote,
}

/// Where a remote embeddings service lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteEndpoint {
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
}

fn default_max_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteEndpoint>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self::reference(DEFAULT_DIMENSION)
    }
}

impl EmbedderConfig {
    pub fn reference(dimension: usize) -> Self {
        Self {
            kind: EmbedderKind::Reference,
            dimension,
            remote: None,
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension == 0 {
            return Err(EmbedError::Config("dimension must be positive".into()));
        }
        if self.kind == EmbedderKind::Remote && self.remote.is_none() {
            return Err(EmbedError::Config(
                "remote embedder requires an endpoint descriptor".into(),
            ));
        }
        Ok(())
    }

    /// Two configs produce interchangeable vectors. The reference kind ignores
    /// any remote descriptor.
    pub fn compatible_with(&self, other: &EmbedderConfig) -> bool {
        match (self.kind, other.kind) {
            (EmbedderKind::Reference, EmbedderKind::Reference) => self.dimension == other.dimension,
            (EmbedderKind::Remote, EmbedderKind::Remote) => {
                self.dimension == other.dimension
                    && self.remote.as_ref().map(|r| &r.model) == other.remote.as_ref().map(|r| &r.model)
            }
            _ => false,
        }
    }
}

pub trait Embedder: Send + Sync {
    fn config(&self) -> &EmbedderConfig;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }

    fn dimension(&self) -> usize {
        self.config().dimension
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn config(&self) -> &EmbedderConfig {
        (**self).config()
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn config(&self) -> &EmbedderConfig {
        (**self).config()
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

/// 64-bit FNV-1a over the UTF-8 bytes of `token`.
pub fn fnv1a64(token: &str) -> u64 {
    token.bytes().fold(FNV_OFFSET, |hash, byte| {
        (hash ^ u64::from(byte)).wrapping_mul(FNV_PRIME)
    })
}

/// Lowercased tokens split on non-alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    config: EmbedderConfig,
}

impl Default for ReferenceEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl ReferenceEmbedder {
    pub fn new(dimension: usize) -> Self {
        Self {
            config: EmbedderConfig::reference(dimension.max(1)),
        }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token) % self.config.dimension as u64) as usize
    }
}

impl Embedder for ReferenceEmbedder {
    fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut counts = vec![0.0; self.config.dimension];
        for token in tokenize(text) {
            counts[self.bucket(&token)] += 1.0;
        }
        Ok(EmbeddingVector::normalized(counts))
    }
}

/// Wraps an embedder and remembers every text it embedded, so a run can later
/// be reproduced offline with [`ReplayEmbedder`].
pub struct RecordingEmbedder<E> {
    inner: E,
    seen: Mutex<BTreeMap<String, EmbeddingVector>>,
}

impl<E: Embedder> RecordingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            seen: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn recorded(&self) -> BTreeMap<String, EmbeddingVector> {
        self.seen.lock().expect("embedding log poisoned").clone()
    }
}

impl<E: Embedder> Embedder for RecordingEmbedder<E> {
    fn config(&self) -> &EmbedderConfig {
        self.inner.config()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let v = self.inner.embed(text)?;
        self.seen
            .lock()
            .expect("embedding log poisoned")
            .insert(text.to_owned(), v.clone());
        Ok(v)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let out = self.inner.embed_batch(texts)?;
        let mut seen = self.seen.lock().expect("embedding log poisoned");
        for (t, v) in texts.iter().zip(&out) {
            seen.insert((*t).to_owned(), v.clone());
        }
        Ok(out)
    }
}

/// Serves embeddings from a recorded map; unknown texts are an error.
pub struct ReplayEmbedder {
    config: EmbedderConfig,
    table: BTreeMap<String, EmbeddingVector>,
}

impl ReplayEmbedder {
    pub fn new(config: EmbedderConfig, table: BTreeMap<String, EmbeddingVector>) -> Self {
        Self { config, table }
    }
}

impl Embedder for ReplayEmbedder {
    fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.table.get(text).cloned().ok_or_else(|| EmbedError::Backend {
            status: None,
            message: format!("no recorded embedding for {text:?}"),
            retryable: false,
        })
    }
}
