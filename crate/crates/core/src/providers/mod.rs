//! Text generation, embedding, reranking and summarization backends.
//!
//! Every backend is a small synchronous trait so that pipelines can be run
//! against the deterministic mocks in [`mock`] or against a remote service
//! speaking a generic chat-completion contract ([`http`]). Generation goes
//! through [`cache::CachedGenerator`] when a response cache is configured.

pub mod cache;
pub mod http;
pub mod mock;
pub mod retry;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheKey, CachedGenerator, ResponseCache};
pub use mock::{HashingEmbedder, OverlapReranker, RuleBasedGenerator, ScriptedGenerator, TruncatingSummarizer};
pub use retry::{RetryPolicy, Retrying};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("context too long: {0}")]
    ContextTooLong(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("response cache: {0}")]
    Cache(String),
}

impl ProviderError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::BackendUnavailable(_) | ProviderError::RateLimited(_))
    }
}

pub type Result<T, E = ProviderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationParams {
    /// Greedy decoding (temperature 0) with a 512-token budget.
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            temperature: 0.0,
            max_tokens: 512,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_id.trim().is_empty() {
            return Err(ProviderError::InvalidRequest("empty model id".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(ProviderError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Preconditions shared by every generator.
pub fn validate_request(messages: &[ChatMessage], params: &GenerationParams) -> Result<()> {
    params.validate()?;
    let first = messages
        .first()
        .ok_or_else(|| ProviderError::InvalidRequest("no messages".into()))?;
    if first.role == Role::Assistant {
        return Err(ProviderError::InvalidRequest(
            "first message must be a system or user message".into(),
        ));
    }
    if let Some(i) = messages.iter().position(|m| m.content.trim().is_empty()) {
        return Err(ProviderError::InvalidRequest(format!("message {i} is empty")));
    }
    Ok(())
}

/// Dense embedding. Mock vectors are unit length, or all zero for text
/// without tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(ProviderError::InvalidResponse("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::InvalidResponse("non-finite embedding entry".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity; 0 when either side is the zero vector.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            dot / denom
        }
    }
}

pub trait Generator: Send + Sync {
    /// Backend identity folded into cache keys.
    fn kind(&self) -> String;

    fn generate(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String>;
}

pub trait Embedder: Send + Sync {
    /// Identity of backend and model; persisted indexes are keyed by it.
    fn tag(&self) -> String;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

pub trait Reranker: Send + Sync {
    /// Returns `(document index, score)` sorted by score, highest first.
    fn rerank(&self, query: &str, documents: &[String]) -> Result<Vec<(usize, f64)>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryLength {
    Short,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extractiveness {
    High,
}

pub trait Summarizer: Send + Sync {
    fn summarize(&self, text: &str, length: SummaryLength, extractiveness: Extractiveness) -> Result<String>;
}

macro_rules! forward_impls {
    ($($ptr:ty),*) => {$(
        impl<T: Generator + ?Sized> Generator for $ptr {
            fn kind(&self) -> String { (**self).kind() }
            fn generate(&self, m: &[ChatMessage], p: &GenerationParams) -> Result<String> { (**self).generate(m, p) }
        }
        impl<T: Embedder + ?Sized> Embedder for $ptr {
            fn tag(&self) -> String { (**self).tag() }
            fn embed(&self, text: &str) -> Result<EmbeddingVector> { (**self).embed(text) }
        }
        impl<T: Reranker + ?Sized> Reranker for $ptr {
            fn rerank(&self, q: &str, d: &[String]) -> Result<Vec<(usize, f64)>> { (**self).rerank(q, d) }
        }
        impl<T: Summarizer + ?Sized> Summarizer for $ptr {
            fn summarize(&self, t: &str, l: SummaryLength, e: Extractiveness) -> Result<String> {
                (**self).summarize(t, l, e)
            }
        }
    )*};
}

forward_impls!(&T, Box<T>, Arc<T>);

/// Counts calls that reach the wrapped backend.
#[derive(Debug)]
pub struct Counted<T> {
    inner: T,
    calls: AtomicUsize,
}

impl<T> Counted<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::SeqCst);
    }
}

impl<T: Generator> Generator for Counted<T> {
    fn kind(&self) -> String {
        self.inner.kind()
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String> {
        self.tick();
        self.inner.generate(messages, params)
    }
}

impl<T: Embedder> Embedder for Counted<T> {
    fn tag(&self) -> String {
        self.inner.tag()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        self.tick();
        self.inner.embed(text)
    }
}

impl<T: Reranker> Reranker for Counted<T> {
    fn rerank(&self, query: &str, documents: &[String]) -> Result<Vec<(usize, f64)>> {
        self.tick();
        self.inner.rerank(query, documents)
    }
}

impl<T: Summarizer> Summarizer for Counted<T> {
    fn summarize(&self, text: &str, length: SummaryLength, extractiveness: Extractiveness) -> Result<String> {
        self.tick();
        self.inner.summarize(text, length, extractiveness)
    }
}
