//! Remote backends over a generic JSON-over-HTTP contract.
//!
//! All endpoints are relative to `API_BASE_URL` and authenticated with
//! `Authorization: Bearer $API_KEY` when the key is set.
//!
//! | endpoint | request | response |
//! |---|---|---|
//! | `POST /chat/completions` | `{"model","messages":[{"role","content"}],"temperature","max_tokens"[,"seed"]}` | `{"choices":[{"message":{"content"}}]}` |
//! | `POST /embeddings` | `{"model","input"}` | `{"data":[{"embedding":[..]}]}` |
//! | `POST /rerank` | `{"model","query","documents":[..]}` | `{"results":[{"index","relevance_score"}]}` |
//! | `POST /summarize` | `{"model","text","length":"short","extractiveness":"high"}` | `{"summary"}` |
//!
//! Status 429 maps to [`ProviderError::RateLimited`], 5xx and transport
//! failures to [`ProviderError::BackendUnavailable`], and a 400/413 whose
//! body mentions the context length to [`ProviderError::ContextTooLong`].

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    validate_request, ChatMessage, Embedder, EmbeddingVector, Extractiveness, GenerationParams, Generator,
    ProviderError, Reranker, Result, SummaryLength, Summarizer,
};

pub const API_KEY_VAR: &str = "API_KEY";
pub const API_BASE_URL_VAR: &str = "API_BASE_URL";

#[derive(Clone)]
pub struct HttpClient {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpClient")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpClient {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(180)))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key,
            agent,
        }
    }

    /// Reads `API_BASE_URL` (required) and `API_KEY` (optional).
    pub fn from_env() -> Result<Self> {
        let base = std::env::var(API_BASE_URL_VAR).map_err(|_| {
            ProviderError::BackendUnavailable(format!("{API_BASE_URL_VAR} is not set"))
        })?;
        Ok(Self::new(base, std::env::var(API_KEY_VAR).ok()))
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &serde_json::Value) -> Result<T> {
        let url = format!("{}/{}", self.base_url, path.trim_start_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| ProviderError::BackendUnavailable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::BackendUnavailable(format!("{url}: reading body: {e}")))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| ProviderError::InvalidResponse(format!("{url}: {e}"))),
            429 => Err(ProviderError::RateLimited(format!("{url}: {text}"))),
            400 | 413 if text.to_ascii_lowercase().contains("context") => {
                Err(ProviderError::ContextTooLong(format!("{url}: {text}")))
            }
            500..=599 => Err(ProviderError::BackendUnavailable(format!("{url}: HTTP {status}: {text}"))),
            _ => Err(ProviderError::InvalidRequest(format!("{url}: HTTP {status}: {text}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpGenerator {
    client: HttpClient,
}

impl HttpGenerator {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl Generator for HttpGenerator {
    fn kind(&self) -> String {
        format!("http:{}", self.client.base_url)
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String> {
        validate_request(messages, params)?;
        let body = serde_json::to_value(ChatRequest {
            model: &params.model_id,
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            seed: params.seed,
        })
        .expect("chat request serializes");
        let resp: ChatResponse = self.client.post("chat/completions", &body)?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::InvalidResponse("no completion in response".into()))
    }
}

#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    client: HttpClient,
    model: String,
}

impl HttpEmbedder {
    pub fn new(client: HttpClient, model: impl Into<String>) -> Self {
        Self {
            client,
            model: model.into(),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl Embedder for HttpEmbedder {
    fn tag(&self) -> String {
        format!("http:{}", self.model)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let resp: EmbeddingResponse = self
            .client
            .post("embeddings", &json!({"model": self.model, "input": text}))?;
        let values = resp
            .data
            .into_iter()
            .next()
            .ok_or_else(|| ProviderError::InvalidResponse("no embedding in response".into()))?
            .embedding;
        EmbeddingVector::new(values)
    }
}

#[derive(Debug, Clone)]
pub struct HttpReranker {
    client: HttpClient,
    model: String,
}

impl HttpReranker {
    pub fn new(client: HttpClient, model: impl Into<String>) -> Self {
        Self {
            client,
            model: model.into(),
        }
    }
}

#[derive(Deserialize)]
struct RerankResponse {
    results: Vec<RerankResult>,
}

#[derive(Deserialize)]
struct RerankResult {
    index: usize,
    relevance_score: f64,
}

impl Reranker for HttpReranker {
    fn rerank(&self, query: &str, documents: &[String]) -> Result<Vec<(usize, f64)>> {
        if documents.is_empty() {
            return Err(ProviderError::InvalidRequest("nothing to rerank".into()));
        }
        let resp: RerankResponse = self.client.post(
            "rerank",
            &json!({"model": self.model, "query": query, "documents": documents}),
        )?;
        let mut scored: Vec<(usize, f64)> = resp
            .results
            .into_iter()
            .map(|r| (r.index, r.relevance_score))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored)
    }
}

#[derive(Debug, Clone)]
pub struct HttpSummarizer {
    client: HttpClient,
    model: String,
}

impl HttpSummarizer {
    pub fn new(client: HttpClient, model: impl Into<String>) -> Self {
        Self {
            client,
            model: model.into(),
        }
    }
}

#[derive(Deserialize)]
struct SummaryResponse {
    summary: String,
}

impl Summarizer for HttpSummarizer {
    fn summarize(&self, text: &str, length: SummaryLength, extractiveness: Extractiveness) -> Result<String> {
        let resp: SummaryResponse = self.client.post(
            "summarize",
            &json!({
                "model": self.model,
                "text": text,
                "length": length,
                "extractiveness": extractiveness,
            }),
        )?;
        Ok(resp.summary)
    }
}
