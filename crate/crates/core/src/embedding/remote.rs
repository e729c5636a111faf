use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Embedder, EmbeddingConfig};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

/// Client for an HTTP embedding service.
///
/// Protocol: `POST <endpoint>` with body `{"text": "..."}`, answered by
/// `{"vector": [..]}`. Connection failures, timeouts, 429 and 5xx responses
/// are retried up to `retries` extra times; a vector of the wrong length is
/// a configuration error and is not retried.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    client: reqwest::blocking::Client,
    endpoint: String,
    dimension: usize,
    retries: u32,
    backoff: Duration,
}

enum Attempt {
    Transient(String),
    Fatal(Error),
}

impl RemoteEmbedder {
    pub fn from_config(config: &EmbeddingConfig) -> Result<Self> {
        let endpoint = config
            .remote_endpoint
            .clone()
            .ok_or_else(|| Error::Config("remote backend requires remote_endpoint".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("cannot build http client: {e}")))?;
        Ok(Self {
            client,
            endpoint,
            dimension: config.dimension,
            retries: config.retries,
            backoff: Duration::from_millis(20),
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn attempt(&self, text: &str) -> std::result::Result<Vec<f64>, Attempt> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&EmbedRequest { text })
            .send()
            .map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Transient(format!("http status {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(Error::Config(format!(
                "embedding service rejected request with status {status}"
            ))));
        }
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| Attempt::Fatal(Error::Config(format!("malformed embedding response: {e}"))))?;
        if body.vector.len() != self.dimension {
            return Err(Attempt::Fatal(Error::Config(format!(
                "embedding service returned dimension {}, configured {}",
                body.vector.len(),
                self.dimension
            ))));
        }
        if body.vector.iter().any(|x| !x.is_finite()) {
            return Err(Attempt::Fatal(Error::Config(
                "embedding service returned non-finite components".into(),
            )));
        }
        Ok(body.vector)
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let attempts = self.retries + 1;
        let mut last = String::new();
        for i in 0..attempts {
            match self.attempt(text) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(msg)) => {
                    last = msg;
                    if i + 1 < attempts {
                        thread::sleep(self.backoff * (i + 1));
                    }
                }
            }
        }
        Err(Error::Retriable {
            attempts,
            message: last,
        })
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}
