//! Fixed-dimension, unit-norm text embeddings.
//!
//! Two providers sit behind [`Embedder`]: a deterministic feature-hashing
//! embedder that needs no model weights, and a client for a remote embedding
//! service whose output is re-validated before use.

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::fnv1a64;
use crate::ragchain::budget::truncate_to_tokens;

/// Tolerance on the L2 norm of every produced vector.
pub const UNIT_NORM_TOLERANCE: f32 = 1e-5;
/// Remote vectors this close to unit norm are re-normalized, others rejected.
pub const REMOTE_RENORMALIZE_TOLERANCE: f32 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("embedding provider error: {message}")]
    Provider { message: String, retryable: bool },
    #[error("text {index} in batch: {source}")]
    BatchItem {
        index: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error("invalid embedder configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Provider { retryable, .. } => *retryable,
            Self::BatchItem { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EmbeddingVector(dim={}, ", self.0.len())?;
        f.debug_list().entries(self.0.iter().take(4)).finish()?;
        f.write_str("..)")
    }
}

impl EmbeddingVector {
    /// Scales `values` to unit length. An all-zero input is rejected rather
    /// than producing a vector that breaks the unit-norm invariant.
    pub fn normalized(values: Vec<f32>) -> Result<Self, EmbedError> {
        let norm = l2_norm(&values);
        if !norm.is_finite() || norm == 0.0 {
            return Err(EmbedError::InvalidInput("vector has zero or non-finite norm".into()));
        }
        Ok(Self(values.into_iter().map(|v| (f64::from(v) / norm) as f32).collect()))
    }

    /// Wraps values that must already be unit-norm.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, EmbedError> {
        let norm = l2_norm(&values) as f32;
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbedError::InvalidInput(format!("vector norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f32 {
        l2_norm(&self.0) as f32
    }

    /// Cosine similarity; for unit vectors this is the dot product.
    pub fn cosine(&self, other: &Self) -> f32 {
        dot(&self.0, &other.0)
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// Sequential f32 dot product. Summation order is fixed so that scores are
/// bit-reproducible.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingProvider {
    LocalHash,
    Remote { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub provider: EmbeddingProvider,
    pub dimension: usize,
    pub max_input_tokens: usize,
    pub model_id: String,
    /// Upper bound on concurrent requests to a remote provider.
    pub max_in_flight: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            provider: EmbeddingProvider::LocalHash,
            dimension: 768,
            max_input_tokens: 8192,
            model_id: "local-hash-v1".into(),
            max_in_flight: 4,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension < 8 {
            return Err(EmbedError::Config(format!("dimension {} is below 8", self.dimension)));
        }
        if self.max_input_tokens == 0 {
            return Err(EmbedError::Config("max_input_tokens must be at least 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(EmbedError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies `EMBED_PROVIDER`, `EMBED_DIM`, `EMBED_ENDPOINT` and
    /// `EMBED_MODEL_ID` on top of `self`.
    pub fn with_env(self) -> Result<Self, EmbedError> {
        self.with_vars(|k| std::env::var(k).ok())
    }

    pub fn with_vars(mut self, var: impl Fn(&str) -> Option<String>) -> Result<Self, EmbedError> {
        if let Some(dim) = var("EMBED_DIM") {
            self.dimension = dim
                .trim()
                .parse()
                .map_err(|_| EmbedError::Config(format!("EMBED_DIM is not an integer: {dim:?}")))?;
        }
        if let Some(model) = var("EMBED_MODEL_ID") {
            self.model_id = model;
        }
        let endpoint = var("EMBED_ENDPOINT");
        match var("EMBED_PROVIDER").as_deref().map(str::trim) {
            None => {
                if let (EmbeddingProvider::Remote { endpoint: current }, Some(e)) = (&mut self.provider, endpoint) {
                    *current = e;
                }
            }
            Some("local_hash") => self.provider = EmbeddingProvider::LocalHash,
            Some("remote") => {
                let endpoint = endpoint.ok_or_else(|| EmbedError::Config("EMBED_PROVIDER=remote needs EMBED_ENDPOINT".into()))?;
                self.provider = EmbeddingProvider::Remote { endpoint };
            }
            Some(other) => return Err(EmbedError::Config(format!("unknown EMBED_PROVIDER {other:?}"))),
        }
        self.validate()?;
        Ok(self)
    }
}

pub trait Embedder: Send + Sync {
    fn config(&self) -> &EmbedderConfig;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;

    /// Order-preserving; fails on the first invalid text with its index.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.embed_text(t).map_err(|e| EmbedError::BatchItem {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    fn dimension(&self) -> usize {
        self.config().dimension
    }
}

pub fn build_embedder(config: EmbedderConfig) -> Result<Arc<dyn Embedder>, EmbedError> {
    config.validate()?;
    Ok(match config.provider.clone() {
        EmbeddingProvider::LocalHash => Arc::new(LocalHashEmbedder::new(config)?),
        EmbeddingProvider::Remote { endpoint } => Arc::new(RemoteEmbedder::new(config, endpoint)?),
    })
}

fn checked_input<'a>(text: &'a str, config: &EmbedderConfig) -> Result<&'a str, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::InvalidInput("text is empty".into()));
    }
    Ok(truncate_to_tokens(text, config.max_input_tokens))
}

/// Lowercased runs of alphanumeric characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Signed feature hashing: each token adds ±1 to bucket `hash mod dimension`,
/// the sign taken from the hash's top bit, followed by L2 normalization.
#[derive(Debug, Clone)]
pub struct LocalHashEmbedder {
    config: EmbedderConfig,
}

impl LocalHashEmbedder {
    pub fn new(config: EmbedderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn with_dimension(dimension: usize) -> Result<Self, EmbedError> {
        Self::new(EmbedderConfig {
            dimension,
            ..EmbedderConfig::default()
        })
    }
}

impl Embedder for LocalHashEmbedder {
    fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let text = checked_input(text, &self.config)?;
        let dim = self.config.dimension as u64;
        let mut acc = vec![0f32; self.config.dimension];
        for token in tokenize(text) {
            let h = fnv1a64(token.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            acc[(h % dim) as usize] += sign;
        }
        EmbeddingVector::normalized(acc)
            .map_err(|_| EmbedError::InvalidInput("text has no features after tokenization".into()))
    }
}

/// Counting semaphore bounding in-flight remote requests.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().expect("semaphore lock");
        while *permits == 0 {
            permits = self.freed.wait(permits).expect("semaphore lock");
        }
        *permits -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore lock") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct RemoteEmbedRequest<'a> {
    model_id: &'a str,
    texts: Vec<&'a str>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RemoteEmbedResponse {
    Wrapped { embeddings: Vec<Vec<f32>> },
    Bare(Vec<Vec<f32>>),
}

/// Client for an embedding service speaking
/// `POST {model_id, texts[]} -> {embeddings: [[f32]]}`.
pub struct RemoteEmbedder {
    config: EmbedderConfig,
    endpoint: String,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

impl fmt::Debug for RemoteEmbedder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteEmbedder")
            .field("endpoint", &self.endpoint)
            .field("model_id", &self.config.model_id)
            .finish()
    }
}

impl RemoteEmbedder {
    pub fn new(config: EmbedderConfig, endpoint: String) -> Result<Self, EmbedError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EmbedError::Config(e.to_string()))?;
        Ok(Self {
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            endpoint,
            client,
        })
    }

    fn request(&self, texts: Vec<&str>) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let expected = texts.len();
        let body = RemoteEmbedRequest {
            model_id: &self.config.model_id,
            texts,
        };
        let _permit = self.in_flight.acquire();
        let response = self.client.post(&self.endpoint).json(&body).send().map_err(|e| EmbedError::Provider {
            message: e.to_string(),
            retryable: e.is_timeout() || e.is_connect() || e.is_request(),
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err(EmbedError::Provider {
                message: format!("embedding service returned {status}"),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        let parsed: RemoteEmbedResponse = response.json().map_err(|e| EmbedError::Provider {
            message: format!("undecodable embedding response: {e}"),
            retryable: false,
        })?;
        let rows = match parsed {
            RemoteEmbedResponse::Wrapped { embeddings } => embeddings,
            RemoteEmbedResponse::Bare(rows) => rows,
        };
        if rows.len() != expected {
            return Err(EmbedError::Provider {
                message: format!("expected {expected} embeddings, got {}", rows.len()),
                retryable: false,
            });
        }
        rows.into_iter().map(|row| self.revalidate(row)).collect()
    }

    fn revalidate(&self, row: Vec<f32>) -> Result<EmbeddingVector, EmbedError> {
        if row.len() != self.config.dimension {
            return Err(EmbedError::Provider {
                message: format!("expected dimension {}, got {}", self.config.dimension, row.len()),
                retryable: false,
            });
        }
        let norm = l2_norm(&row) as f32;
        if !norm.is_finite() || (norm - 1.0).abs() > REMOTE_RENORMALIZE_TOLERANCE {
            return Err(EmbedError::Provider {
                message: format!("embedding norm {norm} too far from 1"),
                retryable: false,
            });
        }
        EmbeddingVector::normalized(row)
    }
}

impl Embedder for RemoteEmbedder {
    fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let text = checked_input(text, &self.config)?;
        Ok(self.request(vec![text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let inputs = texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                checked_input(t, &self.config).map_err(|e| EmbedError::BatchItem {
                    index,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        self.request(inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn embedder(dim: usize) -> LocalHashEmbedder {
        LocalHashEmbedder::with_dimension(dim).unwrap()
    }

    /// Independent re-statement of the hashing scheme over a sparse map.
    fn reference_embed(text: &str, dim: usize) -> Vec<f64> {
        let mut buckets: HashMap<usize, f64> = HashMap::new();
        let lower = text.to_lowercase();
        let mut token = String::new();
        let mut flush = |token: &mut String| {
            if !token.is_empty() {
                let mut h: u64 = 0xcbf29ce484222325;
                for b in token.bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
                let sign = if h & (1 << 63) != 0 { -1.0 } else { 1.0 };
                *buckets.entry((h % dim as u64) as usize).or_default() += sign;
                token.clear();
            }
        };
        for c in lower.chars() {
            if c.is_alphanumeric() {
                token.push(c);
            } else {
                flush(&mut token);
            }
        }
        flush(&mut token);
        let norm: f64 = buckets.values().map(|v| v * v).sum::<f64>().sqrt();
        let mut out = vec![0.0; dim];
        for (i, v) in buckets {
            out[i] = v / norm;
        }
        out
    }

    fn cos64(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn deterministic_and_unit() {
        let e = embedder(768);
        let a = e.embed_text("Autonomous driving safety validation").unwrap();
        let b = e.embed_text("Autonomous driving safety validation").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 768);
        assert!((a.cosine(&a) - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn matches_reference_scheme() {
        let e = embedder(64);
        let text = "Graph neural networks, for molecule property-prediction (2021)";
        let got = e.embed_text(text).unwrap();
        let want = reference_embed(text, 64);
        for (g, w) in got.as_slice().iter().zip(&want) {
            assert!((f64::from(*g) - w).abs() < 1e-6);
        }
    }

    #[test]
    fn shared_tokens_score_higher() {
        // B shares 8 of A's 10 tokens; C shares none.
        let a = "alpha beta gamma delta epsilon zeta eta theta iota kappa";
        let b = "alpha beta gamma delta epsilon zeta eta theta lambda omicron";
        let c = "red green blue cyan magenta yellow black white grey brown";
        let dim = 768;
        let (ra, rb, rc) = (reference_embed(a, dim), reference_embed(b, dim), reference_embed(c, dim));
        let (oracle_ab, oracle_ac) = (cos64(&ra, &rb), cos64(&ra, &rc));
        assert!(oracle_ab > oracle_ac);

        let e = embedder(dim);
        let (ea, eb, ec) = (e.embed_text(a).unwrap(), e.embed_text(b).unwrap(), e.embed_text(c).unwrap());
        assert!((f64::from(ea.cosine(&eb)) - oracle_ab).abs() < 1e-5);
        assert!((f64::from(ea.cosine(&ec)) - oracle_ac).abs() < 1e-5);
        assert!(ea.cosine(&eb) > ea.cosine(&ec));
    }

    #[test]
    fn empty_and_featureless_text_rejected() {
        let e = embedder(32);
        assert!(matches!(e.embed_text("   \n"), Err(EmbedError::InvalidInput(_))));
        assert!(matches!(e.embed_text("!!! --- ???"), Err(EmbedError::InvalidInput(_))));
    }

    #[test]
    fn batch_matches_singletons_and_order() {
        let e = embedder(128);
        let (t1, t2) = ("first abstract text", "second abstract, different words");
        assert_eq!(e.embed_batch(&[t1]).unwrap(), vec![e.embed_text(t1).unwrap()]);
        let fwd = e.embed_batch(&[t1, t2]).unwrap();
        let mut rev = e.embed_batch(&[t2, t1]).unwrap();
        rev.reverse();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn batch_reports_first_bad_index() {
        let e = embedder(16);
        let err = e.embed_batch(&["ok text", "", "also bad ..."]).unwrap_err();
        assert!(matches!(err, EmbedError::BatchItem { index: 1, .. }));
    }

    #[test]
    fn truncation_makes_shared_prefix_identical() {
        let config = EmbedderConfig {
            dimension: 64,
            max_input_tokens: 20,
            ..EmbedderConfig::default()
        };
        let e = LocalHashEmbedder::new(config).unwrap();
        let prefix = "shared words in the opening part of both texts go here and keep going";
        let a = e.embed_text(&format!("{prefix} tail one")).unwrap();
        let b = e.embed_text(&format!("{prefix} completely different tail")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation_and_env() {
        assert!(LocalHashEmbedder::with_dimension(7).is_err());
        let vars: HashMap<&str, &str> = [("EMBED_DIM", "256"), ("EMBED_MODEL_ID", "nomic-embed-text-v1.5")].into();
        let cfg = EmbedderConfig::default()
            .with_vars(|k| vars.get(k).map(|v| v.to_string()))
            .unwrap();
        assert_eq!(cfg.dimension, 256);
        assert_eq!(cfg.model_id, "nomic-embed-text-v1.5");
        let vars: HashMap<&str, &str> = [("EMBED_PROVIDER", "remote")].into();
        assert!(EmbedderConfig::default()
            .with_vars(|k| vars.get(k).map(|v| v.to_string()))
            .is_err());
    }

    #[test]
    fn normalized_rejects_zero() {
        assert!(EmbeddingVector::normalized(vec![0.0; 8]).is_err());
        assert!(EmbeddingVector::from_unit(vec![0.5; 8]).is_err());
        let v = EmbeddingVector::normalized(vec![3.0, 4.0]).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-6);
    }
}
