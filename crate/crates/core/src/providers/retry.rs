//! Bounded exponential backoff for remote backends.

use std::sync::Arc;
use std::time::Duration;

use super::{
    ChatMessage, Embedder, EmbeddingVector, Extractiveness, GenerationParams, Generator, Reranker, Result,
    SummaryLength, Summarizer,
};

/// Waits between attempts. One initial call plus one retry per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            backoff: [1, 4, 16].map(Duration::from_secs).to_vec(),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { backoff: Vec::new() }
    }

    pub fn max_attempts(&self) -> usize {
        self.backoff.len() + 1
    }

    /// Runs `op`, retrying transient failures; the last error surfaces.
    pub fn run<T>(&self, sleep: &dyn Fn(Duration), mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut waits = self.backoff.iter();
        loop {
            match op() {
                Err(e) if e.is_retryable() => match waits.next() {
                    Some(&wait) => {
                        log::warn!("{e}; retrying in {wait:?}");
                        sleep(wait);
                    }
                    None => return Err(e),
                },
                other => return other,
            }
        }
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Wraps any provider with a [`RetryPolicy`].
pub struct Retrying<T> {
    inner: T,
    policy: RetryPolicy,
    sleep: Sleeper,
}

impl<T> Retrying<T> {
    pub fn new(inner: T, policy: RetryPolicy) -> Self {
        Self {
            inner,
            policy,
            sleep: Arc::new(std::thread::sleep),
        }
    }

    /// Replaces the real sleep, e.g. to record waits in tests.
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }
}

impl<T: Generator> Generator for Retrying<T> {
    fn kind(&self) -> String {
        self.inner.kind()
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String> {
        self.policy
            .run(&*self.sleep, || self.inner.generate(messages, params))
    }
}

impl<T: Embedder> Embedder for Retrying<T> {
    fn tag(&self) -> String {
        self.inner.tag()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        self.policy.run(&*self.sleep, || self.inner.embed(text))
    }
}

impl<T: Reranker> Reranker for Retrying<T> {
    fn rerank(&self, query: &str, documents: &[String]) -> Result<Vec<(usize, f64)>> {
        self.policy.run(&*self.sleep, || self.inner.rerank(query, documents))
    }
}

impl<T: Summarizer> Summarizer for Retrying<T> {
    fn summarize(&self, text: &str, length: SummaryLength, extractiveness: Extractiveness) -> Result<String> {
        self.policy
            .run(&*self.sleep, || self.inner.summarize(text, length, extractiveness))
    }
}
