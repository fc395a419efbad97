//! Experiment orchestration: configuration, strategy execution, thesis
//! generation, fine-tune export and result matrices.

mod finetune;
mod matrix;
mod theses;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_corpus_with, load_theses, save_theses, Corpus, CorpusError, LoadOptions, Riddle, Split, ThesisRecord, ThesisSource, OPTION_COUNT};
use crate::evaluation::{save_predictions, score, EvalError, Prediction, ScoreReport};
use crate::prompts::{parse_answer, ExplanationMode, PromptError, PromptRenderer, Strategy, TaskDescription};
use crate::providers::http::{HttpClient, HttpEmbedder, HttpGenerator, HttpReranker, HttpSummarizer};
use crate::providers::mock::RuleMode;
use crate::providers::retry::{RetryPolicy, Retrying};
use crate::providers::{
    CachedGenerator, Counted, Embedder, GenerationParams, Generator, HashingEmbedder, OverlapReranker, ProviderError,
    Reranker, ResponseCache, RuleBasedGenerator, Summarizer, TruncatingSummarizer,
};
use crate::retrieval::{
    attach_explanations, build_index, explanations_from_theses, RetrievalConfig, RetrievalError, RetrievalVariant,
    ShotSelector, VectorIndex,
};
use crate::text::sha256_hex;

pub use finetune::{export_finetune, parse_finetune, FinetuneFormat, FinetuneRecord};
pub use matrix::{load_matrix, parse_matrix, retrieval_legend, run_matrix, MatrixRow, MatrixSummary};
pub use theses::{generate_theses, ThesisFailure, ThesisRun};

/// Split the shot index is built from.
pub const SHOT_SPLIT: Split = Split::Train;

/// Environment variables naming the remote embedding, rerank and
/// summarization models.
pub const EMBEDDING_MODEL_VAR: &str = "EMBEDDING_MODEL";
pub const RERANK_MODEL_VAR: &str = "RERANK_MODEL";
pub const SUMMARIZE_MODEL_VAR: &str = "SUMMARIZE_MODEL";

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("theses missing for {} (riddle, option) pairs, first {:?}", .0.len(), .0.first())]
    CoverageGap(Vec<(String, usize)>),
    #[error("malformed fine-tune record on line {line}: {reason}")]
    MalformedExport { line: usize, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 1 for configuration problems, 2 for data
    /// problems, 3 when a backend could not be reached.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Retrieval(RetrievalError::Config(_)) => 1,
            Error::Provider(_) => 3,
            Error::Retrieval(e) if retrieval_provider_failure(e) => 3,
            Error::Eval(EvalError::Retrieval(e)) if retrieval_provider_failure(e) => 3,
            _ => 2,
        }
    }
}

fn retrieval_provider_failure(e: &RetrievalError) -> bool {
    matches!(
        e,
        RetrievalError::Embedder { .. }
            | RetrievalError::QueryEmbedding(_)
            | RetrievalError::Reranker(_)
            | RetrievalError::Summarizer(_)
    )
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSection {
    pub variant: RetrievalVariant,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default)]
    pub explanation_mode: ExplanationMode,
}

fn default_shots() -> usize {
    3
}

impl RetrievalSection {
    pub fn to_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            shots: self.shots,
            explanation_mode: self.explanation_mode,
            ..RetrievalConfig::new(self.variant)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theses: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

/// One experiment, read from TOML.
///
/// ```toml
/// strategy = "external_cot"
/// description = "detailed"
/// split = "test"
/// parallelism = 4
/// seed = 0
///
/// [retrieval]
/// variant = "ranked"
/// shots = 3
/// explanation_mode = "summarized"
///
/// [provider]
/// model_id = "mock:echo-option"
/// temperature = 0.0
/// max_tokens = 512
///
/// [paths]
/// corpus = "data/corpus.json"
/// theses = "data/theses.json"
/// cache = "cache/responses.jsonl"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    #[serde(default = "default_description")]
    pub description: TaskDescription,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalSection>,
    pub provider: ProviderSection,
    pub paths: PathsSection,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_description() -> TaskDescription {
    TaskDescription::None
}

fn default_split() -> Split {
    Split::Test
}

fn default_parallelism() -> usize {
    1
}

impl ExperimentConfig {
    pub fn new(strategy: Strategy, model_id: impl Into<String>, corpus: impl Into<PathBuf>) -> Self {
        Self {
            strategy,
            description: TaskDescription::None,
            retrieval: None,
            provider: ProviderSection {
                model_id: model_id.into(),
                temperature: 0.0,
                max_tokens: default_max_tokens(),
            },
            paths: PathsSection {
                corpus: corpus.into(),
                theses: None,
                cache: None,
            },
            split: default_split(),
            parallelism: 1,
            seed: 0,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.corpus);
        self.paths.theses.as_mut().map(fix);
        self.paths.cache.as_mut().map(fix);
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        self.params().validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(r) = &self.retrieval {
            r.to_config()
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
            if r.explanation_mode != ExplanationMode::Omitted && self.paths.theses.is_none() {
                return Err(Error::Config(
                    "explanation_mode full/summarized needs paths.theses".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            model_id: self.provider.model_id.clone(),
            temperature: self.provider.temperature,
            max_tokens: self.provider.max_tokens,
            seed: Some(self.seed),
        }
    }

    pub fn retrieval_config(&self) -> Option<RetrievalConfig> {
        self.retrieval.as_ref().map(RetrievalSection::to_config)
    }

    /// Digest of the canonical config. Parallelism and the cache location
    /// do not change results and are left out.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("parallelism");
        if let Some(paths) = obj.get_mut("paths").and_then(|p| p.as_object_mut()) {
            paths.remove("cache");
        }
        sha256_hex(serde_json::to_string(&v).expect("value serializes"))
    }
}

/// Backends for one model id.
#[derive(Clone)]
pub struct Providers {
    pub generator: Arc<dyn Generator>,
    pub embedder: Arc<dyn Embedder>,
    pub reranker: Arc<dyn Reranker>,
    pub summarizer: Arc<dyn Summarizer>,
}

impl Providers {
    /// Offline mocks around a rule-based generator.
    pub fn mock(mode: RuleMode) -> Self {
        Self::mock_with(Arc::new(RuleBasedGenerator::new(mode)))
    }

    /// Offline mocks around any generator.
    pub fn mock_with(generator: Arc<dyn Generator>) -> Self {
        Self {
            generator,
            embedder: Arc::new(HashingEmbedder::default()),
            reranker: Arc::new(OverlapReranker),
            summarizer: Arc::new(TruncatingSummarizer::default()),
        }
    }

    /// `mock:echo-option` and `mock:constant:<A-D>` select mocks; any other
    /// id is sent to the HTTP backend configured in the environment, with
    /// the default retry policy.
    pub fn for_model(model_id: &str) -> Result<Self> {
        if let Some(rest) = model_id.strip_prefix("mock:") {
            let mode = match rest {
                "echo-option" => RuleMode::EchoOption,
                c if c.starts_with("constant:") => {
                    let letter = &c["constant:".len()..];
                    match letter {
                        "A" | "B" | "C" | "D" => RuleMode::Constant(letter.chars().next().unwrap()),
                        _ => return Err(Error::Config(format!("unknown mock answer {letter:?}"))),
                    }
                }
                _ => return Err(Error::Config(format!("unknown mock model {model_id:?}"))),
            };
            return Ok(Self::mock(mode));
        }
        let client = HttpClient::from_env().map_err(|e| Error::Config(e.to_string()))?;
        let model = |var: &str, default: &str| std::env::var(var).unwrap_or_else(|_| default.to_owned());
        let policy = RetryPolicy::default();
        Ok(Self {
            generator: Arc::new(Retrying::new(HttpGenerator::new(client.clone()), policy.clone())),
            embedder: Arc::new(Retrying::new(
                HttpEmbedder::new(client.clone(), model(EMBEDDING_MODEL_VAR, "embedding")),
                policy.clone(),
            )),
            reranker: Arc::new(Retrying::new(
                HttpReranker::new(client.clone(), model(RERANK_MODEL_VAR, "rerank")),
                policy.clone(),
            )),
            summarizer: Arc::new(Retrying::new(
                HttpSummarizer::new(client, model(SUMMARIZE_MODEL_VAR, "summarize")),
                policy,
            )),
        })
    }
}

/// Shared state across runs: resolved providers, open response caches
/// and built shot indexes.
#[derive(Default)]
pub struct RunContext {
    fixed: Option<Providers>,
    providers: Mutex<HashMap<String, Providers>>,
    caches: Mutex<HashMap<PathBuf, Arc<ResponseCache>>>,
    indexes: Mutex<HashMap<(String, String), Arc<VectorIndex>>>,
}

impl RunContext {
    /// Resolves providers from each config's model id.
    pub fn new() -> Self {
        Self::default()
    }

    /// Uses `providers` for every config regardless of model id.
    pub fn with_providers(providers: Providers) -> Self {
        Self {
            fixed: Some(providers),
            ..Self::default()
        }
    }

    /// Makes a prebuilt shot index available to runs over the same corpus.
    pub fn add_index(&self, index: VectorIndex) {
        let key = (index.embedder_tag().to_owned(), index.corpus_checksum().to_owned());
        self.indexes.lock().expect("index lock").insert(key, Arc::new(index));
    }

    pub fn providers(&self, model_id: &str) -> Result<Providers> {
        if let Some(p) = &self.fixed {
            return Ok(p.clone());
        }
        let mut map = self.providers.lock().expect("provider lock");
        if let Some(p) = map.get(model_id) {
            return Ok(p.clone());
        }
        let p = Providers::for_model(model_id)?;
        map.insert(model_id.to_owned(), p.clone());
        Ok(p)
    }

    pub fn cache(&self, path: &Path) -> Result<Arc<ResponseCache>> {
        let mut map = self.caches.lock().expect("cache lock");
        if let Some(c) = map.get(path) {
            return Ok(c.clone());
        }
        let c = Arc::new(ResponseCache::open(path)?);
        map.insert(path.to_owned(), c.clone());
        Ok(c)
    }

    fn index(&self, corpus: &Corpus, embedder: &dyn Embedder) -> Result<Arc<VectorIndex>> {
        let key = (embedder.tag(), corpus.checksum());
        if let Some(i) = self.indexes.lock().expect("index lock").get(&key) {
            return Ok(i.clone());
        }
        let index = Arc::new(build_index(corpus, SHOT_SPLIT, embedder)?);
        self.indexes.lock().expect("index lock").insert(key, index.clone());
        Ok(index)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    /// Generation requests issued by the run, cached or not.
    pub generator_requests: usize,
    /// Requests that reached the generation backend.
    pub backend_generator_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub predictions: Vec<Prediction>,
    /// Absent when the split is unlabeled.
    pub report: Option<ScoreReport>,
    pub calls: CallCounts,
    /// Riddles answered with an abstention because a backend failed.
    pub provider_failures: usize,
    pub wall_time_secs: f64,
    /// Theses produced by external chain-of-thought.
    pub theses: Vec<ThesisRecord>,
}

/// `run.json`: the record without its bulky per-riddle parts.
#[derive(Serialize)]
struct RunSummary<'a> {
    fingerprint: &'a str,
    config: &'a ExperimentConfig,
    report: Option<&'a ScoreReport>,
    calls: CallCounts,
    provider_failures: usize,
    wall_time_secs: f64,
    predictions: usize,
}

impl RunRecord {
    /// Writes predictions.jsonl, run.json and, when present, report.json,
    /// report.txt and theses.json to `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_predictions(&self.predictions, dir.join("predictions.jsonl"))?;
        let summary = RunSummary {
            fingerprint: &self.fingerprint,
            config: &self.config,
            report: self.report.as_ref(),
            calls: self.calls,
            provider_failures: self.provider_failures,
            wall_time_secs: self.wall_time_secs,
            predictions: self.predictions.len(),
        };
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))
        };
        write("run.json", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
        if let Some(report) = &self.report {
            write("report.json", report.to_json())?;
            write("report.txt", report.to_table())?;
        }
        if !self.theses.is_empty() {
            save_theses(&self.theses, dir.join("theses.json"))?;
        }
        Ok(())
    }
}

fn load_run_corpus(config: &ExperimentConfig) -> Result<Corpus> {
    // Singleton-group corpora are accepted; scoring suppresses group metrics.
    let opts = LoadOptions {
        allow_partial_groups: true,
    };
    Ok(load_corpus_with(&config.paths.corpus, &opts)?.0)
}

struct Item {
    prediction: Prediction,
    theses: Vec<ThesisRecord>,
    requests: usize,
    provider_failure: bool,
}

struct Job<'a> {
    strategy: Strategy,
    description: TaskDescription,
    renderer: PromptRenderer,
    params: GenerationParams,
    generator: &'a dyn Generator,
    selector: Option<ShotSelector<'a>>,
    explanations: HashMap<String, String>,
    summarizer: &'a dyn Summarizer,
    fingerprint: &'a str,
}

/// A per-riddle failure: provider failures become abstentions, anything
/// else aborts the run.
enum ItemError {
    Provider(String),
    Fatal(Box<Error>),
}

impl From<ProviderError> for ItemError {
    fn from(e: ProviderError) -> Self {
        ItemError::Provider(e.to_string())
    }
}

impl From<PromptError> for ItemError {
    fn from(e: PromptError) -> Self {
        ItemError::Fatal(Box::new(e.into()))
    }
}

impl From<RetrievalError> for ItemError {
    fn from(e: RetrievalError) -> Self {
        if retrieval_provider_failure(&e) {
            ItemError::Provider(e.to_string())
        } else {
            ItemError::Fatal(Box::new(e.into()))
        }
    }
}

impl Job<'_> {
    fn run(&self, labeled: &Riddle) -> Result<Item> {
        // Everything below sees the riddle without its label.
        let riddle = labeled.without_label();
        let mut requests = 0;
        let mut theses = Vec::new();
        let outcome = self.answer(&riddle, &mut requests, &mut theses);
        let (predicted_index, raw_completion, error) = match outcome {
            Ok(completion) => (parse_answer(&completion, &riddle.options), completion, None),
            Err(ItemError::Provider(msg)) => {
                log::warn!("riddle {}: {msg}", riddle.id);
                (None, String::new(), Some(msg))
            }
            Err(ItemError::Fatal(e)) => return Err(*e),
        };
        Ok(Item {
            provider_failure: error.is_some(),
            prediction: Prediction {
                riddle_id: riddle.id.clone(),
                predicted_index,
                raw_completion,
                config_fingerprint: self.fingerprint.to_owned(),
                error,
            },
            theses,
            requests,
        })
    }

    fn answer(&self, riddle: &Riddle, requests: &mut usize, theses: &mut Vec<ThesisRecord>) -> Result<String, ItemError> {
        let shots = match &self.selector {
            Some(selector) => {
                let selection = selector.select(&riddle.id, &riddle.question)?;
                *requests += selection.generator_calls;
                attach_explanations(
                    &selection.shots,
                    &self.explanations,
                    selector.config.explanation_mode,
                    self.summarizer,
                )?
            }
            None => Vec::new(),
        };
        let mut generate = |messages: &[crate::providers::ChatMessage]| {
            *requests += 1;
            self.generator.generate(messages, &self.params)
        };
        let prompt = if self.strategy == Strategy::ExternalCot {
            let mut texts = Vec::with_capacity(OPTION_COUNT);
            for option_index in 0..OPTION_COUNT {
                let text = generate(&self.renderer.thesis(riddle, option_index)?.messages)?;
                theses.push(ThesisRecord {
                    riddle_id: riddle.id.clone(),
                    option_index,
                    thesis: text.clone(),
                    source: ThesisSource::Generated,
                });
                texts.push(text);
            }
            self.renderer
                .final_with_theses(riddle, &texts, self.description, &shots)?
        } else {
            self.renderer.riddle(riddle, self.strategy, self.description, &shots)?
        };
        Ok(generate(&prompt.messages)?)
    }
}

/// Runs one experiment and, with `out_dir`, persists its artifacts.
pub fn run_experiment(config: &ExperimentConfig, ctx: &RunContext, out_dir: Option<&Path>) -> Result<RunRecord> {
    let started = Instant::now();
    config.validate()?;
    let corpus = load_run_corpus(config)?;
    let riddles: Vec<&Riddle> = corpus.split(config.split).collect();
    if riddles.is_empty() {
        return Err(CorpusError::EmptySplit(config.split).into());
    }
    let providers = ctx.providers(&config.provider.model_id)?;
    let counted = Arc::new(Counted::new(providers.generator.clone()));
    let generator: Box<dyn Generator> = match &config.paths.cache {
        Some(path) => Box::new(CachedGenerator::new(counted.clone(), ctx.cache(path)?)),
        None => Box::new(counted.clone()),
    };

    let retrieval = config.retrieval_config();
    let index = match &retrieval {
        Some(_) => Some(ctx.index(&corpus, &*providers.embedder)?),
        None => None,
    };
    let explanations = match (&retrieval, &config.paths.theses) {
        (Some(r), Some(path)) if r.explanation_mode != ExplanationMode::Omitted => {
            explanations_from_theses(&load_theses(path)?, &corpus)
        }
        _ => HashMap::new(),
    };
    let fingerprint = config.fingerprint();
    let params = config.params();
    let job = Job {
        strategy: config.strategy,
        description: config.description,
        renderer: PromptRenderer::default(),
        params: params.clone(),
        generator: &*generator,
        selector: index.as_deref().zip(retrieval.as_ref()).map(|(index, rc)| ShotSelector {
            index,
            embedder: &*providers.embedder,
            reranker: &*providers.reranker,
            generator: &*generator,
            params: &params,
            config: rc,
        }),
        explanations,
        summarizer: &*providers.summarizer,
        fingerprint: &fingerprint,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let items: Vec<Item> = pool.install(|| riddles.par_iter().map(|r| job.run(r)).collect::<Result<_>>())?;

    let mut predictions = Vec::with_capacity(items.len());
    let mut theses = Vec::new();
    let mut calls = CallCounts::default();
    let mut provider_failures = 0;
    for item in items {
        calls.generator_requests += item.requests;
        provider_failures += usize::from(item.provider_failure);
        predictions.push(item.prediction);
        theses.extend(item.theses);
    }
    calls.backend_generator_calls = counted.calls();

    let report = if riddles.iter().all(|r| r.label.is_some()) {
        Some(score(&predictions, &corpus, config.split)?)
    } else {
        None
    };
    let record = RunRecord {
        fingerprint,
        config: config.clone(),
        predictions,
        report,
        calls,
        provider_failures,
        wall_time_secs: started.elapsed().as_secs_f64(),
        theses,
    };
    if let Some(dir) = out_dir {
        record.persist(dir)?;
    }
    Ok(record)
}
