//! Frozen text encoders for the semantic reward.
//!
//! The reference encoder is a hashed bag of words: tokens are lowercased
//! alphanumeric runs, each token is hashed with a seeded XXH64 into one of
//! `dimension` buckets, bucket values are term counts, and the vector is
//! L2-normalized. All components are non-negative, so the cosine between two
//! reference embeddings always lies in `[0, 1]`.

mod remote;

pub use remote::RemoteEmbedder;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use crate::error::{Error, Result};

/// A frozen text encoder. Same text in, same vector out, for the lifetime of
/// the encoder.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
    fn dimension(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Reference,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub dimension: usize,
    pub seed: u64,
    pub backend: Backend,
    pub remote_endpoint: Option<String>,
    pub timeout_ms: u64,
    /// Retries after the first attempt for transient remote failures.
    pub retries: u32,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dimension: 256,
            seed: 0,
            backend: Backend::Reference,
            remote_endpoint: None,
            timeout_ms: 5_000,
            retries: 3,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < 8 {
            return Err(Error::Config(format!(
                "embedding dimension must be >= 8, got {}",
                self.dimension
            )));
        }
        if self.backend == Backend::Remote && self.remote_endpoint.is_none() {
            return Err(Error::Config(
                "remote embedding backend requires remote_endpoint".into(),
            ));
        }
        Ok(())
    }
}

/// Lowercased alphanumeric runs of `text`.
pub fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Bucket index of a single (already lowercased) token.
pub fn token_bucket(token: &str, dimension: usize, seed: u64) -> usize {
    (xxh64(token.as_bytes(), seed) % dimension as u64) as usize
}

pub fn reference_embed(text: &str, config: &EmbeddingConfig) -> Vec<f64> {
    let mut v = vec![0.0; config.dimension];
    for tok in word_tokens(text) {
        v[token_bucket(&tok, config.dimension, config.seed)] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            what: "cosine",
            expected: u.len(),
            actual: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (nu * nv))
}

#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    config: EmbeddingConfig,
}

impl ReferenceEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        Self {
            config: EmbeddingConfig {
                dimension,
                seed,
                ..EmbeddingConfig::default()
            },
        }
    }
}

impl Default for ReferenceEmbedder {
    fn default() -> Self {
        Self::new(256, 0)
    }
}

impl Embedder for ReferenceEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(reference_embed(text, &self.config))
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }
}

/// Builds the encoder selected by `config.backend`.
pub fn build_embedder(config: &EmbeddingConfig) -> Result<Box<dyn Embedder>> {
    config.validate()?;
    Ok(match config.backend {
        Backend::Reference => Box::new(ReferenceEmbedder {
            config: config.clone(),
        }),
        Backend::Remote => Box::new(RemoteEmbedder::from_config(config)?),
    })
}

/// Convenience wrapper for the remote backend, mirroring [`reference_embed`].
pub fn remote_embed(text: &str, config: &EmbeddingConfig) -> Result<Vec<f64>> {
    if config.backend != Backend::Remote {
        return Err(Error::Config("remote_embed called with non-remote backend".into()));
    }
    RemoteEmbedder::from_config(config)?.embed(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EmbeddingConfig {
        EmbeddingConfig::default()
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let v = reference_embed("", &cfg());
        assert_eq!(v.len(), 256);
        assert!(v.iter().all(|&x| x == 0.0));
        let v = reference_embed("  ,;. ", &cfg());
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn repeated_tokens_keep_direction() {
        assert_eq!(
            reference_embed("cell cell", &cfg()),
            reference_embed("cell", &cfg())
        );
    }

    #[test]
    fn case_and_punctuation_are_ignored() {
        assert_eq!(
            reference_embed("Tumor, STROMA!", &cfg()),
            reference_embed("tumor stroma", &cfg())
        );
    }

    #[test]
    fn cosine_examples() {
        let x = [0.3, -1.2, 4.0];
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.7071).abs() < 1e-4);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        assert!(matches!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.dimension = 4;
        assert!(c.validate().is_err());
        let c = EmbeddingConfig {
            backend: Backend::Remote,
            ..cfg()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_changes_buckets() {
        let a = EmbeddingConfig { seed: 1, ..cfg() };
        let b = EmbeddingConfig { seed: 2, ..cfg() };
        let words = ["tumor", "stroma", "nuclei", "gland", "mitosis"];
        let moved = words
            .iter()
            .filter(|w| token_bucket(w, 256, a.seed) != token_bucket(w, 256, b.seed))
            .count();
        assert!(moved > 0);
        let v = reference_embed("tumor stroma", &b);
        assert!(v.iter().all(|&x| x >= 0.0));
    }
}
