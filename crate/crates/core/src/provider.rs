//! Fetching candidate responses from model endpoints.
//!
//! Two kinds of provider exist: a remote HTTP endpoint that receives
//! `{"track", "prompt"}` and answers `{"response"}`, and a fixture corpus
//! used by tests, demos and the simulator.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::track::TrackId;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_RESPONSE_CAP: usize = 256 * 1024;
pub const TRUNCATION_MARKER: &str = "\n\n[response truncated]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderDescriptor {
    HttpEndpoint {
        url: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default = "default_max_retries")]
        max_retries: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bearer_token: Option<String>,
    },
    /// Responses come from a corpus file; without a path every lookup falls
    /// back to the deterministic placeholder.
    Fixture {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
}

fn default_timeout_secs() -> u64 {
    DEFAULT_TIMEOUT.as_secs()
}

fn default_max_retries() -> u32 {
    1
}

impl ProviderDescriptor {
    pub fn http(url: impl Into<String>) -> Self {
        ProviderDescriptor::HttpEndpoint {
            url: url.into(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            bearer_token: None,
        }
    }

    pub fn placeholder() -> Self {
        ProviderDescriptor::Fixture { path: None }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        match self {
            ProviderDescriptor::HttpEndpoint {
                url, timeout_secs, ..
            } => {
                if *timeout_secs == 0 {
                    return Err(ProviderError::InvalidDescriptor("timeout must be > 0".into()));
                }
                reqwest::Url::parse(url)
                    .map_err(|e| ProviderError::InvalidDescriptor(format!("bad url {url}: {e}")))?;
                Ok(())
            }
            ProviderDescriptor::Fixture { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("invalid provider descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("provider timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("provider request failed after {attempts} attempt(s): {message}")]
    Request { attempts: u32, message: String },
    #[error("provider returned status {0}")]
    Status(u16),
    #[error("provider returned an unexpected body: {0}")]
    Body(String),
    #[error("fixture corpus {path}: {message}")]
    Fixture { path: String, message: String },
}

/// Lowercase hex SHA-256 of the prompt text.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Corpus key: `"<track>:<sha256(prompt)>"`.
pub fn fixture_key(track: TrackId, prompt: &str) -> String {
    format!("{track}:{}", prompt_hash(prompt))
}

/// Deterministic stand-in text. Distinct per model but never contains the
/// model id, since it is shown to voters before identities are revealed.
pub fn placeholder_response(model_id: &str, track: TrackId, prompt: &str) -> String {
    let hash = prompt_hash(prompt);
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update(b"\0");
    h.update(hash.as_bytes());
    let tag = hex::encode(h.finalize());
    format!(
        "Placeholder answer {} for {track} prompt {}.",
        &tag[..16],
        &hash[..16]
    )
}

/// Cuts `text` to at most `cap` bytes on a char boundary and appends the
/// truncation marker when anything was removed.
pub fn truncate_response(mut text: String, cap: usize) -> String {
    if text.len() <= cap {
        return text;
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    text.truncate(end);
    text.push_str(TRUNCATION_MARKER);
    text
}

/// `"track:sha256(prompt)" -> { model_id -> response }`
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureCorpus {
    entries: HashMap<String, HashMap<String, String>>,
}

impl FixtureCorpus {
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let err = |message: String| ProviderError::Fixture {
            path: path.display().to_string(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
    }

    pub fn insert(&mut self, track: TrackId, prompt: &str, model_id: &str, response: &str) {
        self.entries
            .entry(fixture_key(track, prompt))
            .or_default()
            .insert(model_id.to_owned(), response.to_owned());
    }

    pub fn lookup(&self, track: TrackId, prompt: &str, model_id: &str) -> Option<&str> {
        self.entries
            .get(&fixture_key(track, prompt))
            .and_then(|m| m.get(model_id))
            .map(String::as_str)
    }

    /// Corpus text if present, the placeholder otherwise.
    pub fn response(&self, track: TrackId, prompt: &str, model_id: &str) -> String {
        self.lookup(track, prompt, model_id)
            .map(str::to_owned)
            .unwrap_or_else(|| placeholder_response(model_id, track, prompt))
    }
}

#[derive(Serialize)]
struct EndpointRequest<'a> {
    track: TrackId,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct EndpointResponse {
    response: String,
}

/// Fetches candidate responses. Cheap to clone.
#[derive(Clone)]
pub struct ProviderGateway {
    client: reqwest::Client,
    corpora: Arc<Mutex<HashMap<PathBuf, Arc<FixtureCorpus>>>>,
    response_cap: usize,
}

impl Default for ProviderGateway {
    fn default() -> Self {
        Self::new(DEFAULT_RESPONSE_CAP)
    }
}

impl ProviderGateway {
    pub fn new(response_cap: usize) -> Self {
        Self {
            client: reqwest::Client::new(),
            corpora: Arc::default(),
            response_cap,
        }
    }

    /// Loads (and caches) the corpus at `path`.
    pub fn corpus(&self, path: &Path) -> Result<Arc<FixtureCorpus>, ProviderError> {
        if let Some(c) = self.corpora.lock().get(path) {
            return Ok(c.clone());
        }
        let corpus = Arc::new(FixtureCorpus::load(path)?);
        self.corpora.lock().insert(path.to_owned(), corpus.clone());
        Ok(corpus)
    }

    /// Synchronous path for fixture providers.
    pub fn fetch_fixture(
        &self,
        model_id: &str,
        path: Option<&Path>,
        track: TrackId,
        prompt: &str,
    ) -> Result<String, ProviderError> {
        let text = match path {
            Some(p) => self.corpus(p)?.response(track, prompt, model_id),
            None => placeholder_response(model_id, track, prompt),
        };
        Ok(truncate_response(text, self.response_cap))
    }

    pub async fn fetch_response(
        &self,
        model_id: &str,
        descriptor: &ProviderDescriptor,
        track: TrackId,
        prompt: &str,
    ) -> Result<String, ProviderError> {
        descriptor.validate()?;
        match descriptor {
            ProviderDescriptor::Fixture { path } => {
                self.fetch_fixture(model_id, path.as_deref(), track, prompt)
            }
            ProviderDescriptor::HttpEndpoint {
                url,
                timeout_secs,
                max_retries,
                bearer_token,
            } => {
                let timeout = Duration::from_secs(*timeout_secs);
                let attempts = max_retries + 1;
                let mut last = ProviderError::Timeout { attempts };
                for attempt in 1..=attempts {
                    let mut req = self
                        .client
                        .post(url)
                        .json(&EndpointRequest { track, prompt });
                    if let Some(token) = bearer_token {
                        req = req.bearer_auth(token);
                    }
                    match tokio::time::timeout(timeout, self.send(req)).await {
                        Ok(Ok(text)) => return Ok(truncate_response(text, self.response_cap)),
                        Ok(Err(e @ (ProviderError::Status(_) | ProviderError::Body(_)))) => {
                            return Err(e)
                        }
                        Ok(Err(ProviderError::Request { message, .. })) => {
                            last = ProviderError::Request {
                                attempts: attempt,
                                message,
                            }
                        }
                        Ok(Err(e)) => return Err(e),
                        Err(_) => last = ProviderError::Timeout { attempts: attempt },
                    }
                    tracing::debug!(model_id, attempt, "provider attempt failed: {last}");
                }
                Err(last)
            }
        }
    }

    async fn send(&self, req: reqwest::RequestBuilder) -> Result<String, ProviderError> {
        let resp = req.send().await.map_err(|e| ProviderError::Request {
            attempts: 0,
            message: e.to_string(),
        })?;
        if resp.status() != reqwest::StatusCode::OK {
            return Err(ProviderError::Status(resp.status().as_u16()));
        }
        let body: EndpointResponse = resp
            .json()
            .await
            .map_err(|e| ProviderError::Body(e.to_string()))?;
        Ok(body.response)
    }

    /// Fetches both candidates concurrently under one shared deadline.
    /// Either failure fails the pair.
    pub async fn fetch_pair(
        &self,
        left: (&str, &ProviderDescriptor),
        right: (&str, &ProviderDescriptor),
        track: TrackId,
        prompt: &str,
        deadline: Duration,
    ) -> Result<(String, String), ProviderError> {
        let both = async {
            tokio::join!(
                self.fetch_response(left.0, left.1, track, prompt),
                self.fetch_response(right.0, right.1, track, prompt),
            )
        };
        match tokio::time::timeout(deadline, both).await {
            Ok((l, r)) => Ok((l?, r?)),
            Err(_) => Err(ProviderError::Timeout { attempts: 1 }),
        }
    }
}
