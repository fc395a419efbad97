//! Dynamic few-shot selection over an in-memory vector index.
//!
//! Three pipelines pick shots for a riddle:
//! - **ordinary**: exact cosine top-k over the indexed questions;
//! - **ranked**: top-`ranked_pool` by cosine, reranked, first `shots` kept;
//! - **fusion**: four query variants (original, semantic rewrite, context
//!   rewrite, context rewrite of the semantic rewrite) each retrieve
//!   `fusion_per_variant` entries; the union is deduplicated by riddle id
//!   (keeping the best cosine), reranked against the original riddle,
//!   truncated to `fusion_keep`, and the first `shots` are used.
//!
//! Cosine ties are broken by ascending riddle id everywhere.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Split, ThesisRecord};
use crate::prompts::{ExplanationMode, PromptRenderer, ShotBlock};
use crate::providers::{
    Embedder, EmbeddingVector, Extractiveness, GenerationParams, Generator, ProviderError, Reranker, SummaryLength,
    Summarizer,
};
use crate::text::word_count;

/// Explanations longer than this many words are summarized in
/// [`ExplanationMode::Summarized`].
pub const SUMMARY_WORD_THRESHOLD: usize = 250;

const INDEX_FORMAT: &str = "lateral-vector-index";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("split {0} has no riddles to index")]
    EmptySplit(Split),
    #[error("riddle {riddle_id:?} has no label; shots need a ground-truth answer")]
    UnlabeledEntry { riddle_id: String },
    #[error("embedding riddle {riddle_id:?} failed: {source}")]
    Embedder {
        riddle_id: String,
        #[source]
        source: ProviderError,
    },
    #[error("embedding query failed: {0}")]
    QueryEmbedding(#[source] ProviderError),
    #[error("embedding dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reranker failed: {0}")]
    Reranker(String),
    #[error("summarizer failed: {0}")]
    Summarizer(#[source] ProviderError),
    #[error("no explanation available for shot {0:?}")]
    MissingExplanation(String),
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error("index at {path} is stale: built for ({found_tag}, {found_checksum}), expected ({expected_tag}, {expected_checksum})")]
    StaleIndex {
        path: String,
        found_tag: String,
        found_checksum: String,
        expected_tag: String,
        expected_checksum: String,
    },
    #[error("index file {path}: {reason}")]
    IndexFile { path: String, reason: String },
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalVariant {
    Ordinary,
    Ranked,
    Fusion,
}

/// Source of the fourth fusion query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FourthVariant {
    /// Context rewrite of the semantic rewrite.
    #[default]
    ContextOfSemantic,
    /// Context rewrite of the context rewrite.
    ContextOfContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub variant: RetrievalVariant,
    pub shots: usize,
    pub ranked_pool: usize,
    pub fusion_per_variant: usize,
    pub fusion_keep: usize,
    pub explanation_mode: ExplanationMode,
    pub exclude_self: bool,
    pub fourth_variant: FourthVariant,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            variant: RetrievalVariant::Ordinary,
            shots: 3,
            ranked_pool: 25,
            fusion_per_variant: 5,
            fusion_keep: 5,
            explanation_mode: ExplanationMode::Omitted,
            exclude_self: true,
            fourth_variant: FourthVariant::ContextOfSemantic,
        }
    }
}

impl RetrievalConfig {
    pub fn new(variant: RetrievalVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(RetrievalError::Config(m));
        if self.shots == 0 {
            return fail("shots must be at least 1".into());
        }
        if self.shots > self.ranked_pool {
            return fail(format!("shots {} exceeds ranked_pool {}", self.shots, self.ranked_pool));
        }
        if self.fusion_per_variant == 0 {
            return fail("fusion_per_variant must be at least 1".into());
        }
        if !(self.shots <= self.fusion_keep && self.fusion_keep <= self.fusion_per_variant * QUERY_VARIANTS) {
            return fail(format!(
                "need shots {} <= fusion_keep {} <= 4 x fusion_per_variant {}",
                self.shots, self.fusion_keep, self.fusion_per_variant
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub riddle_id: String,
    /// The embedded text (the riddle's question).
    pub text: String,
    /// Ground-truth option text, the shot's answer.
    pub answer: String,
    pub vector: EmbeddingVector,
}

/// Exact-scan cosine index over one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorIndex {
    entries: Vec<IndexEntry>,
    dim: usize,
    embedder_tag: String,
    corpus_checksum: String,
    split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub riddle_id: String,
    pub score: f64,
}

/// One selected shot. Ranks start at 1; scores are cosine similarities for
/// the ordinary pipeline and reranker scores otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedShot {
    pub riddle_id: String,
    pub score: f64,
    pub rank: usize,
    pub shot: ShotBlock,
}

/// Scores closer than this rank as tied. Cosines that are equal in exact
/// arithmetic can differ in the last bits once computed in floating point.
pub const SCORE_RESOLUTION: f64 = 1e-12;

fn tie_key(score: f64) -> i64 {
    (score / SCORE_RESOLUTION).round() as i64
}

/// Candidate ordering: higher score first, then ascending id.
fn better(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    tie_key(a_score).cmp(&tie_key(b_score)).then_with(|| b_id.cmp(a_id))
}

struct HeapItem<'a> {
    score: f64,
    id: &'a str,
    pos: usize,
}

impl PartialEq for HeapItem<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem<'_> {}
impl PartialOrd for HeapItem<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        better(self.score, self.id, other.score, other.id)
    }
}

/// Embeds the question of every riddle in `split`.
pub fn build_index(corpus: &Corpus, split: Split, embedder: &dyn Embedder) -> Result<VectorIndex> {
    let riddles: Vec<_> = corpus.split(split).collect();
    if riddles.is_empty() {
        return Err(RetrievalError::EmptySplit(split));
    }
    let entries = riddles
        .par_iter()
        .map(|r| {
            let answer = r.answer().ok_or_else(|| RetrievalError::UnlabeledEntry {
                riddle_id: r.id.clone(),
            })?;
            let vector = embedder.embed(&r.question).map_err(|source| RetrievalError::Embedder {
                riddle_id: r.id.clone(),
                source,
            })?;
            Ok(IndexEntry {
                riddle_id: r.id.clone(),
                text: r.question.clone(),
                answer: answer.to_owned(),
                vector,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = entries[0].vector.dim();
    if let Some(bad) = entries.iter().find(|e| e.vector.dim() != dim) {
        return Err(RetrievalError::DimensionMismatch {
            expected: dim,
            got: bad.vector.dim(),
        });
    }
    Ok(VectorIndex {
        entries,
        dim,
        embedder_tag: embedder.tag(),
        corpus_checksum: corpus.checksum(),
        split,
    })
}

impl VectorIndex {
    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedder_tag(&self) -> &str {
        &self.embedder_tag
    }

    pub fn corpus_checksum(&self) -> &str {
        &self.corpus_checksum
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn entry(&self, riddle_id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.riddle_id == riddle_id)
    }

    /// Top-`k` entries by cosine with `query`, skipping `exclude`.
    pub fn search(&self, query: &EmbeddingVector, k: usize, exclude: &HashSet<&str>) -> Result<Vec<ScoredId>> {
        if query.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        // Min-heap of the k best seen so far.
        let mut heap: BinaryHeap<Reverse<HeapItem<'_>>> = BinaryHeap::with_capacity(k + 1);
        for (pos, e) in self.entries.iter().enumerate() {
            if exclude.contains(e.riddle_id.as_str()) {
                continue;
            }
            let item = HeapItem {
                score: query.cosine(&e.vector),
                id: &e.riddle_id,
                pos,
            };
            if heap.len() < k {
                heap.push(Reverse(item));
            } else if heap.peek().is_some_and(|worst| item > worst.0) {
                heap.pop();
                heap.push(Reverse(item));
            }
        }
        let mut best: Vec<HeapItem<'_>> = heap.into_iter().map(|Reverse(i)| i).collect();
        best.sort_by(|a, b| b.cmp(a));
        Ok(best
            .into_iter()
            .map(|i| ScoredId {
                riddle_id: self.entries[i.pos].riddle_id.clone(),
                score: i.score,
            })
            .collect())
    }

    fn shot(&self, riddle_id: &str, score: f64, rank: usize) -> RetrievedShot {
        let e = self.entry(riddle_id).expect("candidate comes from this index");
        RetrievedShot {
            riddle_id: riddle_id.to_owned(),
            score,
            rank,
            shot: ShotBlock::bare(e.text.clone(), e.answer.clone()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = IndexFile {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            index: self.clone(),
        };
        let body = serde_json::to_string(&file).expect("index serializes");
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| index_file_err(path, e))?;
        }
        fs::write(path, body).map_err(|e| index_file_err(path, e))
    }

    /// Loads a persisted index, refusing one built by another embedder or
    /// from different corpus contents.
    pub fn load(path: impl AsRef<Path>, embedder_tag: &str, corpus_checksum: &str) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| index_file_err(path, e))?;
        let file: IndexFile = serde_json::from_str(&body).map_err(|e| index_file_err(path, e))?;
        if file.format != INDEX_FORMAT || file.version != INDEX_VERSION {
            return Err(index_file_err(
                path,
                format!("unsupported format {} v{}", file.format, file.version),
            ));
        }
        let index = file.index;
        if index.embedder_tag != embedder_tag || index.corpus_checksum != corpus_checksum {
            return Err(RetrievalError::StaleIndex {
                path: path.display().to_string(),
                found_tag: index.embedder_tag,
                found_checksum: index.corpus_checksum,
                expected_tag: embedder_tag.into(),
                expected_checksum: corpus_checksum.into(),
            });
        }
        Ok(index)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    index: VectorIndex,
}

fn index_file_err(path: &Path, e: impl std::fmt::Display) -> RetrievalError {
    RetrievalError::IndexFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn embed_query(index: &VectorIndex, embedder: &dyn Embedder, query: &str) -> Result<EmbeddingVector> {
    let v = embedder.embed(query).map_err(RetrievalError::QueryEmbedding)?;
    if v.dim() != index.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dim(),
            got: v.dim(),
        });
    }
    Ok(v)
}

/// Plain top-`k` by cosine.
pub fn retrieve_ordinary(
    index: &VectorIndex,
    embedder: &dyn Embedder,
    query: &str,
    k: usize,
    exclude: &HashSet<&str>,
) -> Result<Vec<RetrievedShot>> {
    let q = embed_query(index, embedder, query)?;
    Ok(index
        .search(&q, k, exclude)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| index.shot(&s.riddle_id, s.score, i + 1))
        .collect())
}

/// Reranks `candidates` against `query`. Returns `(candidate position,
/// score)` ordered by score, ties by candidate position.
fn rerank_candidates(reranker: &dyn Reranker, query: &str, candidates: &[String]) -> Result<Vec<(usize, f64)>> {
    let mut scored = reranker
        .rerank(query, candidates)
        .map_err(|e| RetrievalError::Reranker(e.to_string()))?;
    let mut seen = vec![false; candidates.len()];
    for &(i, score) in &scored {
        if i >= candidates.len() || std::mem::replace(&mut seen[i], true) || !score.is_finite() {
            return Err(RetrievalError::Reranker(format!(
                "reranker returned an invalid ranking over {} documents",
                candidates.len()
            )));
        }
    }
    if scored.len() != candidates.len() {
        return Err(RetrievalError::Reranker(format!(
            "reranker scored {} of {} documents",
            scored.len(),
            candidates.len()
        )));
    }
    scored.sort_by(|a, b| tie_key(b.1).cmp(&tie_key(a.1)).then(a.0.cmp(&b.0)));
    Ok(scored)
}

/// Cosine pool of `ranked_pool`, reranked, first `shots` kept.
pub fn retrieve_ranked(
    index: &VectorIndex,
    embedder: &dyn Embedder,
    reranker: &dyn Reranker,
    query: &str,
    config: &RetrievalConfig,
    exclude: &HashSet<&str>,
) -> Result<Vec<RetrievedShot>> {
    config.validate()?;
    let q = embed_query(index, embedder, query)?;
    let pool = index.search(&q, config.ranked_pool, exclude)?;
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = pool
        .iter()
        .map(|s| index.entry(&s.riddle_id).expect("pool entry").text.clone())
        .collect();
    Ok(rerank_candidates(reranker, query, &texts)?
        .into_iter()
        .take(config.shots)
        .enumerate()
        .map(|(rank, (pos, score))| index.shot(&pool[pos].riddle_id, score, rank + 1))
        .collect())
}

/// Number of fusion queries.
pub const QUERY_VARIANTS: usize = 4;

/// The fusion queries in order: original, semantic rewrite, context
/// rewrite, and the configured fourth variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVariants {
    pub texts: [String; QUERY_VARIANTS],
    /// Set where generation failed and the original text was substituted.
    pub fallback: [bool; QUERY_VARIANTS],
    pub generator_calls: usize,
}

fn clean_generation(text: &str) -> Option<String> {
    let t = text.trim();
    let t = t
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(t)
        .trim();
    (!t.is_empty()).then(|| t.to_owned())
}

/// Rewrites `original` with the reconstruction prompts. Generation
/// failures (including empty output) fall back to the original text; a
/// rewrite of a failed rewrite is not attempted and falls back as well.
pub fn generate_query_variants(
    original: &str,
    generator: &dyn Generator,
    params: &GenerationParams,
    fourth: FourthVariant,
) -> QueryVariants {
    let renderer = PromptRenderer::default();
    let mut calls = 0;
    let mut run = |prompt: crate::prompts::RenderedPrompt| {
        calls += 1;
        match generator.generate(&prompt.messages, params) {
            Ok(text) => clean_generation(&text),
            Err(e) => {
                log::warn!("query variant generation failed: {e}");
                None
            }
        }
    };
    let semantic = run(renderer.semantic_reconstruction(original));
    let context = run(renderer.context_reconstruction(original));
    let base = match fourth {
        FourthVariant::ContextOfSemantic => semantic.as_deref(),
        FourthVariant::ContextOfContext => context.as_deref(),
    };
    let chained = base.and_then(|b| run(renderer.context_reconstruction(b)));

    let slots = [Some(original.to_owned()), semantic, context, chained];
    let fallback = slots.clone().map(|s| s.is_none());
    QueryVariants {
        texts: slots.map(|s| s.unwrap_or_else(|| original.to_owned())),
        fallback,
        generator_calls: calls,
    }
}

/// Everything the fusion pipeline computed, for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutcome {
    pub variants: QueryVariants,
    /// Cosine hits per variant, before deduplication.
    pub per_variant: Vec<Vec<ScoredId>>,
    /// Deduplicated candidates with their best cosine, in rerank input order.
    pub candidates: Vec<ScoredId>,
    /// Top `fusion_keep` after reranking.
    pub kept: Vec<RetrievedShot>,
    /// First `shots` of `kept`.
    pub shots: Vec<RetrievedShot>,
}

impl FusionOutcome {
    pub fn retrieved_before_dedup(&self) -> usize {
        self.per_variant.iter().map(Vec::len).sum()
    }
}

/// Fusion pipeline over precomputed query variants.
pub fn fuse(
    index: &VectorIndex,
    embedder: &dyn Embedder,
    reranker: &dyn Reranker,
    original: &str,
    variants: QueryVariants,
    config: &RetrievalConfig,
    exclude: &HashSet<&str>,
) -> Result<FusionOutcome> {
    config.validate()?;
    let mut per_variant = Vec::with_capacity(QUERY_VARIANTS);
    for text in &variants.texts {
        let q = embed_query(index, embedder, text)?;
        per_variant.push(index.search(&q, config.fusion_per_variant, exclude)?);
    }

    let mut best: HashMap<&str, f64> = HashMap::new();
    for hit in per_variant.iter().flatten() {
        let slot = best.entry(hit.riddle_id.as_str()).or_insert(hit.score);
        if hit.score > *slot {
            *slot = hit.score;
        }
    }
    let mut candidates: Vec<ScoredId> = best
        .into_iter()
        .map(|(id, score)| ScoredId {
            riddle_id: id.to_owned(),
            score,
        })
        .collect();
    candidates.sort_by(|a, b| better(b.score, &b.riddle_id, a.score, &a.riddle_id));

    let (kept, shots) = if candidates.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let texts: Vec<String> = candidates
            .iter()
            .map(|c| index.entry(&c.riddle_id).expect("candidate entry").text.clone())
            .collect();
        let kept: Vec<RetrievedShot> = rerank_candidates(reranker, original, &texts)?
            .into_iter()
            .take(config.fusion_keep)
            .enumerate()
            .map(|(rank, (pos, score))| index.shot(&candidates[pos].riddle_id, score, rank + 1))
            .collect();
        let shots = kept.iter().take(config.shots).cloned().collect();
        (kept, shots)
    };
    Ok(FusionOutcome {
        variants,
        per_variant,
        candidates,
        kept,
        shots,
    })
}

/// Generates the query variants for `original` and runs [`fuse`].
#[allow(clippy::too_many_arguments)]
pub fn retrieve_fusion(
    index: &VectorIndex,
    embedder: &dyn Embedder,
    reranker: &dyn Reranker,
    generator: &dyn Generator,
    params: &GenerationParams,
    original: &str,
    config: &RetrievalConfig,
    exclude: &HashSet<&str>,
) -> Result<FusionOutcome> {
    config.validate()?;
    let variants = generate_query_variants(original, generator, params, config.fourth_variant);
    fuse(index, embedder, reranker, original, variants, config, exclude)
}

/// Bundles the providers one pipeline needs.
#[derive(Clone, Copy)]
pub struct ShotSelector<'a> {
    pub index: &'a VectorIndex,
    pub embedder: &'a dyn Embedder,
    pub reranker: &'a dyn Reranker,
    pub generator: &'a dyn Generator,
    pub params: &'a GenerationParams,
    pub config: &'a RetrievalConfig,
}

/// Shots plus the number of generator calls spent finding them.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub shots: Vec<RetrievedShot>,
    pub generator_calls: usize,
}

impl ShotSelector<'_> {
    /// Runs the configured pipeline for a query riddle. With
    /// `exclude_self`, the riddle's own id never comes back.
    pub fn select(&self, riddle_id: &str, question: &str) -> Result<Selection> {
        let exclude: HashSet<&str> = if self.config.exclude_self {
            HashSet::from([riddle_id])
        } else {
            HashSet::new()
        };
        let (shots, generator_calls) = match self.config.variant {
            RetrievalVariant::Ordinary => (
                retrieve_ordinary(self.index, self.embedder, question, self.config.shots, &exclude)?,
                0,
            ),
            RetrievalVariant::Ranked => (
                retrieve_ranked(self.index, self.embedder, self.reranker, question, self.config, &exclude)?,
                0,
            ),
            RetrievalVariant::Fusion => {
                let out = retrieve_fusion(
                    self.index,
                    self.embedder,
                    self.reranker,
                    self.generator,
                    self.params,
                    question,
                    self.config,
                    &exclude,
                )?;
                let calls = out.variants.generator_calls;
                (out.shots, calls)
            }
        };
        Ok(Selection { shots, generator_calls })
    }
}

/// Explanation per riddle: the thesis written for its gold option.
pub fn explanations_from_theses(theses: &[ThesisRecord], corpus: &Corpus) -> HashMap<String, String> {
    theses
        .iter()
        .filter(|t| corpus.get(&t.riddle_id).and_then(|r| r.label) == Some(t.option_index))
        .map(|t| (t.riddle_id.clone(), t.thesis.clone()))
        .collect()
}

/// Turns retrieved shots into prompt blocks under `mode`. Summarized mode
/// only calls the summarizer for explanations over
/// [`SUMMARY_WORD_THRESHOLD`] words.
pub fn attach_explanations(
    shots: &[RetrievedShot],
    explanations: &HashMap<String, String>,
    mode: ExplanationMode,
    summarizer: &dyn Summarizer,
) -> Result<Vec<ShotBlock>> {
    shots
        .iter()
        .map(|s| {
            let mut block = ShotBlock::bare(s.shot.question.clone(), s.shot.answer.clone());
            if mode == ExplanationMode::Omitted {
                return Ok(block);
            }
            let explanation = explanations
                .get(&s.riddle_id)
                .ok_or_else(|| RetrievalError::MissingExplanation(s.riddle_id.clone()))?;
            if mode == ExplanationMode::Summarized && word_count(explanation) > SUMMARY_WORD_THRESHOLD {
                block.explanation = Some(
                    summarizer
                        .summarize(explanation, SummaryLength::Short, Extractiveness::High)
                        .map_err(RetrievalError::Summarizer)?,
                );
                block.explanation_mode = ExplanationMode::Summarized;
            } else {
                block.explanation = Some(explanation.clone());
                block.explanation_mode = ExplanationMode::Full;
            }
            Ok(block)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Category, Riddle};
    use crate::providers::{Counted, HashingEmbedder, OverlapReranker, ScriptedGenerator, TruncatingSummarizer};

    fn riddle(id: &str, question: &str) -> Riddle {
        Riddle {
            id: id.into(),
            question: question.into(),
            options: ["w".into(), "x".into(), "y".into(), "z".into()],
            label: Some(0),
            category: Category::Original,
            group_id: id.into(),
            split: Split::Train,
        }
    }

    fn corpus(questions: &[(&str, &str)]) -> Corpus {
        let opts = crate::corpus::LoadOptions {
            allow_partial_groups: true,
        };
        Corpus::with_options(questions.iter().map(|(id, q)| riddle(id, q)).collect(), &opts)
            .unwrap()
            .0
    }

    fn none() -> HashSet<&'static str> {
        HashSet::new()
    }

    #[test]
    fn build_index_one_entry_per_riddle_and_deterministic() {
        let c = corpus(&[("a", "red fox"), ("b", "blue bird"), ("c", "green frog")]);
        let e = HashingEmbedder::default();
        let i1 = build_index(&c, Split::Train, &e).unwrap();
        let i2 = build_index(&c, Split::Train, &e).unwrap();
        assert_eq!(i1.len(), 3);
        assert_eq!(i1, i2);
        assert_eq!(i1.entries()[1].text, "blue bird");
        assert!(matches!(
            build_index(&c, Split::Test, &e),
            Err(RetrievalError::EmptySplit(Split::Test))
        ));
    }

    #[test]
    fn self_query_ranks_first_unless_excluded() {
        let c = corpus(&[("a", "red fox runs"), ("b", "blue bird sings"), ("c", "red bird")]);
        let e = HashingEmbedder::default();
        let idx = build_index(&c, Split::Train, &e).unwrap();
        let hits = retrieve_ordinary(&idx, &e, "blue bird sings", 2, &none()).unwrap();
        assert_eq!(hits[0].riddle_id, "b");
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        assert_eq!(hits[0].rank, 1);
        assert_eq!(hits[1].rank, 2);
        let hits = retrieve_ordinary(&idx, &e, "blue bird sings", 3, &HashSet::from(["b"])).unwrap();
        assert!(hits.iter().all(|h| h.riddle_id != "b"));
        assert_eq!(hits.len(), 2);
    }

    #[test]
    fn zero_score_ties_break_by_id() {
        let c = corpus(&[("c", "gamma"), ("a", "alpha"), ("b", "beta")]);
        let e = HashingEmbedder::default();
        let idx = build_index(&c, Split::Train, &e).unwrap();
        let hits = retrieve_ordinary(&idx, &e, "unrelated words", 2, &none()).unwrap();
        assert_eq!(hits.iter().map(|h| h.riddle_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn config_invariants() {
        assert!(RetrievalConfig::default().validate().is_ok());
        let bad = RetrievalConfig {
            shots: 6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RetrievalConfig {
            fusion_keep: 21,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RetrievalConfig {
            ranked_pool: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ranked_clamps_pool_to_index() {
        let c = corpus(&[("a", "red fox"), ("b", "red fox runs fast"), ("c", "blue")]);
        let e = HashingEmbedder::default();
        let idx = build_index(&c, Split::Train, &e).unwrap();
        let r = Counted::new(OverlapReranker);
        let out = retrieve_ranked(&idx, &e, &r, "red fox", &RetrievalConfig::default(), &none()).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].riddle_id, "a");
        assert_eq!(out[0].score, 1.0);
        assert_eq!(r.calls(), 1);
    }

    struct BadReranker;
    impl Reranker for BadReranker {
        fn rerank(&self, _: &str, d: &[String]) -> crate::providers::Result<Vec<(usize, f64)>> {
            Ok(vec![(0, 1.0); d.len()])
        }
    }

    #[test]
    fn malformed_reranking_rejected() {
        let c = corpus(&[("a", "red fox"), ("b", "blue")]);
        let e = HashingEmbedder::default();
        let idx = build_index(&c, Split::Train, &e).unwrap();
        let out = retrieve_ranked(&idx, &e, &BadReranker, "x", &RetrievalConfig::default(), &none());
        assert!(matches!(out, Err(RetrievalError::Reranker(_))));
    }

    #[test]
    fn query_variants_scripted_and_fallback() {
        let p = GenerationParams::new("m");
        let g = ScriptedGenerator::new()
            .when_contains("SR Riddle:\"", "unused")
            .when_contains("ORG Riddle: \"orig\"\n\nSR Riddle:", "\"sr text\"")
            .when_contains("ORG Riddle: \"orig\"\n\nCR Riddle:", "cr text")
            .when_contains("ORG Riddle: \"sr text\"\n\nCR Riddle:", "cr of sr");
        let v = generate_query_variants("orig", &g, &p, FourthVariant::ContextOfSemantic);
        assert_eq!(v.texts, ["orig", "sr text", "cr text", "cr of sr"]);
        assert_eq!(v.fallback, [false; 4]);
        assert_eq!(v.generator_calls, 3);

        let failing = ScriptedGenerator::new()
            .fail_when_contains("CR Riddle:")
            .when_contains("SR Riddle:", "sr text");
        let v = generate_query_variants("orig", &failing, &p, FourthVariant::ContextOfSemantic);
        assert_eq!(v.texts, ["orig", "sr text", "orig", "orig"]);
        assert_eq!(v.fallback, [false, false, true, true]);
    }

    #[test]
    fn explanation_modes() {
        let shots = vec![RetrievedShot {
            riddle_id: "a".into(),
            score: 1.0,
            rank: 1,
            shot: ShotBlock::bare("q", "ans"),
        }];
        let long: String = (0..300).map(|i| format!("w{i} ")).collect();
        let short: String = (0..100).map(|i| format!("w{i} ")).collect();
        let s = Counted::new(TruncatingSummarizer::default());

        let blocks = attach_explanations(&shots, &HashMap::new(), ExplanationMode::Omitted, &s).unwrap();
        assert!(blocks[0].explanation.is_none());

        let map = HashMap::from([("a".to_string(), long.clone())]);
        let blocks = attach_explanations(&shots, &map, ExplanationMode::Full, &s).unwrap();
        assert_eq!(blocks[0].explanation.as_deref(), Some(long.as_str()));
        let blocks = attach_explanations(&shots, &map, ExplanationMode::Summarized, &s).unwrap();
        assert_eq!(word_count(blocks[0].explanation.as_ref().unwrap()), 50);
        assert_eq!(blocks[0].explanation_mode, ExplanationMode::Summarized);
        assert_eq!(s.calls(), 1);

        let map = HashMap::from([("a".to_string(), short.clone())]);
        let blocks = attach_explanations(&shots, &map, ExplanationMode::Summarized, &s).unwrap();
        assert_eq!(blocks[0].explanation.as_deref(), Some(short.as_str()));
        assert_eq!(blocks[0].explanation_mode, ExplanationMode::Full);
        assert_eq!(s.calls(), 1);

        assert!(matches!(
            attach_explanations(&shots, &HashMap::new(), ExplanationMode::Full, &s),
            Err(RetrievalError::MissingExplanation(_))
        ));
    }

    #[test]
    fn index_persistence_and_staleness() {
        let c = corpus(&[("a", "red fox"), ("b", "blue bird")]);
        let e = HashingEmbedder::default();
        let idx = build_index(&c, Split::Train, &e).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        idx.save(&path).unwrap();
        let loaded = VectorIndex::load(&path, &e.tag(), &c.checksum()).unwrap();
        assert_eq!(loaded, idx);
        assert!(matches!(
            VectorIndex::load(&path, "other-embedder", &c.checksum()),
            Err(RetrievalError::StaleIndex { .. })
        ));
        let c2 = corpus(&[("a", "red fox"), ("b", "blue birds")]);
        assert!(matches!(
            VectorIndex::load(&path, &e.tag(), &c2.checksum()),
            Err(RetrievalError::StaleIndex { .. })
        ));
    }
}
