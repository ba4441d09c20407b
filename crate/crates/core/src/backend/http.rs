//! JSON-over-HTTP encoder and LLM clients.
//!
//! Encoder: `POST {endpoint}/encode_text {"text"}` and
//! `POST {endpoint}/encode_image {"image_b64"}`, both answering
//! `{"embedding": [...], "dim": n}`.
//! LLM: `POST {endpoint}/generate {"prompt", "image_b64"?, "temperature"}`
//! answering `{"text": "..."}`. A refusal is HTTP 451 or `{"refused": true}`.

use std::sync::OnceLock;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use log::{debug, warn};
use rand::Rng;
use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};

use super::{
    check_temperature, BackendError, EncoderBackend, GenerateRequest, LlmBackend, PROTOCOL_VERSION,
};
use crate::embedding::EmbeddingVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(250),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let base = self.base_delay.saturating_mul(1 << attempt.min(16));
        if self.jitter {
            base.mul_f64(rand::rng().random_range(0.5..1.5))
        } else {
            base
        }
    }

    fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_transient() && attempt + 1 < self.max_attempts => {
                    let delay = self.delay(attempt);
                    debug!("transient backend error ({e}), retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone)]
struct HttpClient {
    client: Client,
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

#[derive(Deserialize)]
struct ErrorBody {
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    refused: bool,
}

impl HttpClient {
    fn new(endpoint: &str, api_key: Option<String>) -> Self {
        let client = Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("HTTP client configuration is valid");
        Self {
            client,
            endpoint: endpoint.trim_end_matches('/').to_owned(),
            api_key,
            retry: RetryPolicy::default(),
        }
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, BackendError> {
        let url = format!("{}/{path}", self.endpoint);
        self.retry.run(|| {
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req.send().map_err(|e| BackendError::Transport {
                endpoint: url.clone(),
                message: e.to_string(),
            })?;
            let status = resp.status().as_u16();
            let bytes = resp.bytes().map_err(|e| BackendError::Transport {
                endpoint: url.clone(),
                message: e.to_string(),
            })?;
            if status == 451 {
                let msg = serde_json::from_slice::<ErrorBody>(&bytes)
                    .ok()
                    .and_then(|b| b.error);
                return Err(BackendError::SafetyRefusal(
                    msg.unwrap_or_else(|| "HTTP 451".into()),
                ));
            }
            if status == 413 {
                return Err(BackendError::TooLong);
            }
            if !(200..300).contains(&status) {
                let message = serde_json::from_slice::<ErrorBody>(&bytes)
                    .ok()
                    .and_then(|b| b.error)
                    .unwrap_or_else(|| String::from_utf8_lossy(&bytes).into_owned());
                return Err(BackendError::Remote { status, message });
            }
            if let Ok(ErrorBody {
                refused: true,
                error,
            }) = serde_json::from_slice::<ErrorBody>(&bytes)
            {
                return Err(BackendError::SafetyRefusal(
                    error.unwrap_or_else(|| "refused".into()),
                ));
            }
            serde_json::from_slice(&bytes).map_err(|e| BackendError::Protocol(e.to_string()))
        })
    }
}

#[derive(Serialize)]
struct EncodeTextBody<'a> {
    text: &'a str,
}

#[derive(Serialize)]
struct EncodeImageBody {
    image_b64: String,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    embedding: Vec<f64>,
    dim: usize,
}

/// Encoder service client.
#[derive(Debug)]
pub struct HttpEncoder {
    http: HttpClient,
    model: String,
    dim: OnceLock<usize>,
    max_text_units: Option<usize>,
}

impl HttpEncoder {
    pub fn new(endpoint: &str, api_key: Option<String>) -> Self {
        Self {
            http: HttpClient::new(endpoint, api_key),
            model: "default".into(),
            dim: OnceLock::new(),
            max_text_units: None,
        }
    }

    /// Model name, part of the identity so different models never share cache entries.
    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    /// Declares the expected dimension up front instead of learning it from the first response.
    pub fn with_dim(self, dim: usize) -> Self {
        let _ = self.dim.set(dim);
        self
    }

    /// Longer texts are truncated (with a warning) before being sent.
    pub fn with_max_text_units(mut self, max: usize) -> Self {
        self.max_text_units = Some(max);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.http.retry = retry;
        self
    }

    fn accept(&self, resp: EmbeddingResponse) -> Result<EmbeddingVector, BackendError> {
        if resp.embedding.len() != resp.dim {
            return Err(BackendError::Protocol(format!(
                "response declares dim {} but carries {} values",
                resp.dim,
                resp.embedding.len()
            )));
        }
        let expected = *self.dim.get_or_init(|| resp.dim);
        if resp.dim != expected {
            return Err(BackendError::DimMismatch {
                expected,
                found: resp.dim,
            });
        }
        Ok(EmbeddingVector::new(resp.embedding)?)
    }
}

impl EncoderBackend for HttpEncoder {
    fn identity(&self) -> String {
        format!(
            "http-encoder:{}@{}#{PROTOCOL_VERSION}",
            self.model, self.http.endpoint
        )
    }

    fn reported_dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    fn max_text_units(&self) -> Option<usize> {
        self.max_text_units
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::TooShort);
        }
        let text = match self.max_text_units {
            Some(max) if text.chars().count() > max => {
                let cut: String = text.chars().take(max).collect();
                warn!(
                    "truncating {}-character text to the encoder budget of {max}",
                    text.chars().count()
                );
                std::borrow::Cow::Owned(cut)
            }
            _ => std::borrow::Cow::Borrowed(text),
        };
        let resp = self
            .http
            .post("encode_text", &EncodeTextBody { text: &text })?;
        self.accept(resp)
    }

    fn encode_image(&self, image: &[u8]) -> Result<EmbeddingVector, BackendError> {
        if image.is_empty() {
            return Err(BackendError::InvalidImage("empty image".into()));
        }
        let resp = self.http.post(
            "encode_image",
            &EncodeImageBody {
                image_b64: BASE64.encode(image),
            },
        )?;
        self.accept(resp)
    }
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
    temperature: f64,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// Multimodal LLM service client.
#[derive(Debug)]
pub struct HttpLlm {
    http: HttpClient,
    model: String,
}

impl HttpLlm {
    pub fn new(endpoint: &str, api_key: Option<String>) -> Self {
        Self {
            http: HttpClient::new(endpoint, api_key),
            model: "default".into(),
        }
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.http.retry = retry;
        self
    }
}

impl LlmBackend for HttpLlm {
    fn identity(&self) -> String {
        format!(
            "http-llm:{}@{}#{PROTOCOL_VERSION}",
            self.model, self.http.endpoint
        )
    }

    fn generate(&self, request: &GenerateRequest<'_>) -> Result<String, BackendError> {
        check_temperature(request.temperature)?;
        let body = GenerateBody {
            prompt: request.prompt,
            image_b64: request.image.map(|b| BASE64.encode(b)),
            temperature: request.temperature,
        };
        let resp: GenerateResponse = self.http.post("generate", &body)?;
        if resp.text.is_empty() {
            return Err(BackendError::Protocol("LLM returned empty text".into()));
        }
        Ok(resp.text)
    }
}
