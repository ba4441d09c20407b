//! Access to the cross-modal encoder and the multimodal LLM.
//!
//! Both capabilities are traits so the pipeline can run against HTTP
//! services, the deterministic offline mocks, or either of those behind the
//! on-disk response cache.

mod cache;
mod http;
mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingVector, VectorError};

pub use cache::{
    CacheError, CacheStats, CacheStore, CachedEncoder, CachedLlm, EntryMeta, VerifyReport,
};
pub use http::{HttpEncoder, HttpLlm, RetryPolicy};
pub use mock::{ImageMarker, LlmFixture, MockEncoder, MockFixtures, MockLlm};

/// Wire protocol revision, part of every HTTP backend identity.
pub const PROTOCOL_VERSION: &str = "v1";

pub const ENV_ENCODER_URL: &str = "ZSFUSE_ENCODER_URL";
pub const ENV_LLM_URL: &str = "ZSFUSE_LLM_URL";
pub const ENV_CACHE_DIR: &str = "ZSFUSE_CACHE_DIR";
pub const ENV_API_KEY: &str = "ZSFUSE_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("remote service error (HTTP {status}): {message}")]
    Remote { status: u16, message: String },
    #[error("text exceeds the service budget")]
    TooLong,
    #[error("text is empty")]
    TooShort,
    #[error("LLM declined the request: {0}")]
    SafetyRefusal(String),
    #[error("temperature {0} is outside [0, 1]")]
    InvalidTemperature(f64),
    #[error("invalid image data: {0}")]
    InvalidImage(String),
    #[error("encoder returned a {found}-dimensional vector, expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

impl BackendError {
    /// Whether a retry has a chance of succeeding.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport { .. } => true,
            BackendError::Remote { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub(crate) fn check_temperature(temperature: f64) -> Result<(), BackendError> {
    if !(0.0..=1.0).contains(&temperature) {
        return Err(BackendError::InvalidTemperature(temperature));
    }
    Ok(())
}

/// Cross-modal encoder pair: text and image into one embedding space.
pub trait EncoderBackend: Send + Sync {
    /// Model, endpoint and protocol; used to key cached responses.
    fn identity(&self) -> String;

    /// Output dimension, if known before the first call.
    fn reported_dim(&self) -> Option<usize>;

    /// Longest text (in characters) the encoder accepts, if bounded.
    fn max_text_units(&self) -> Option<usize> {
        None
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector, BackendError>;

    fn encode_image(&self, image: &[u8]) -> Result<EmbeddingVector, BackendError>;
}

/// One LLM request.
///
/// `sample` distinguishes repeated draws of the same prompt at a nonzero
/// temperature. It never reaches the wire; it only keeps cache entries and
/// mock variants apart.
#[derive(Debug, Clone, Copy)]
pub struct GenerateRequest<'a> {
    pub prompt: &'a str,
    pub image: Option<&'a [u8]>,
    pub temperature: f64,
    pub sample: u32,
}

impl<'a> GenerateRequest<'a> {
    pub fn new(prompt: &'a str, image: Option<&'a [u8]>, temperature: f64) -> Self {
        Self {
            prompt,
            image,
            temperature,
            sample: 0,
        }
    }

    pub fn with_sample(mut self, sample: u32) -> Self {
        self.sample = sample;
        self
    }
}

/// Multimodal LLM.
pub trait LlmBackend: Send + Sync {
    fn identity(&self) -> String;

    /// Nonempty generated text, or a typed error.
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<String, BackendError>;
}

/// Delegate-call and cache-hit counters shared by the wrappers of one run.
#[derive(Debug, Default)]
pub struct CallCounters {
    encode_text: AtomicU64,
    encode_image: AtomicU64,
    generate: AtomicU64,
    cache_hits: AtomicU64,
    corrupt_entries: AtomicU64,
}

impl CallCounters {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub(crate) fn record_encode_text(&self) {
        self.encode_text.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn record_encode_image(&self) {
        self.encode_image.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn record_generate(&self) {
        self.generate.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn record_hit(&self) {
        self.cache_hits.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn record_corrupt(&self) {
        self.corrupt_entries.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            encode_text_calls: self.encode_text.load(Ordering::Relaxed),
            encode_image_calls: self.encode_image.load(Ordering::Relaxed),
            generate_calls: self.generate.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            corrupt_entries: self.corrupt_entries.load(Ordering::Relaxed),
        }
    }
}

/// Point-in-time copy of [`CallCounters`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub encode_text_calls: u64,
    pub encode_image_calls: u64,
    pub generate_calls: u64,
    pub cache_hits: u64,
    pub corrupt_entries: u64,
}

impl CounterSnapshot {
    /// Calls that reached the wrapped backend, i.e. were not served from cache.
    pub fn delegate_calls(&self) -> u64 {
        self.encode_text_calls + self.encode_image_calls + self.generate_calls
    }

    /// Counter increase since `earlier`.
    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            encode_text_calls: self.encode_text_calls - earlier.encode_text_calls,
            encode_image_calls: self.encode_image_calls - earlier.encode_image_calls,
            generate_calls: self.generate_calls - earlier.generate_calls,
            cache_hits: self.cache_hits - earlier.cache_hits,
            corrupt_entries: self.corrupt_entries - earlier.corrupt_entries,
        }
    }
}

/// The encoder and LLM used for a run, wrapped so every call is counted.
#[derive(Clone)]
pub struct Backends {
    pub encoder: Arc<dyn EncoderBackend>,
    pub llm: Arc<dyn LlmBackend>,
    pub counters: Arc<CallCounters>,
}

impl Backends {
    /// Counts calls without caching.
    pub fn new(encoder: Arc<dyn EncoderBackend>, llm: Arc<dyn LlmBackend>) -> Self {
        let counters = CallCounters::new();
        Self {
            encoder: Arc::new(CachedEncoder::counted(encoder, counters.clone())),
            llm: Arc::new(CachedLlm::counted(llm, counters.clone())),
            counters,
        }
    }

    /// Serves repeated requests from `store`.
    pub fn with_cache(
        encoder: Arc<dyn EncoderBackend>,
        llm: Arc<dyn LlmBackend>,
        store: CacheStore,
    ) -> Self {
        let counters = CallCounters::new();
        Self {
            encoder: Arc::new(CachedEncoder::cached(
                encoder,
                store.clone(),
                counters.clone(),
            )),
            llm: Arc::new(CachedLlm::cached(llm, store, counters.clone())),
            counters,
        }
    }

    /// Deterministic offline backends.
    pub fn mock(dim: usize, seed: u64) -> Self {
        Self::new(
            Arc::new(MockEncoder::new(dim, seed)),
            Arc::new(MockLlm::new()),
        )
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }

    /// Combined identity of both backends, recorded as provenance.
    pub fn identity(&self) -> String {
        format!(
            "encoder={};llm={}",
            self.encoder.identity(),
            self.llm.identity()
        )
    }
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("encoder", &self.encoder.identity())
            .field("llm", &self.llm.identity())
            .finish()
    }
}
