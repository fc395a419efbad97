//! Grouped multiple-choice riddle corpora.
//!
//! A corpus file is a JSON array of riddle records. Every riddle belongs to a
//! reconstruction group holding one `original`, one `semantic` and one
//! `context` member within its split. When a record omits `group_id`, the
//! group is derived from the id by stripping a trailing `_SR` or `_CR`
//! (the public BrainTeaser naming: `SP-12`, `SP-12_SR`, `SP-12_CR`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{sha256_hex, tokenize};

/// Number of answer options every riddle carries.
pub const OPTION_COUNT: usize = 4;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a JSON array: {source}")]
    NotAnArray {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },
    #[error("duplicate riddle id {0:?}")]
    DuplicateId(String),
    #[error("group {group_id:?} in split {split}: {reason}")]
    BrokenGroup {
        split: Split,
        group_id: String,
        reason: String,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split {0} has no riddles")]
    EmptySplit(Split),
    #[error("thesis record {index}: {reason}")]
    MalformedThesis { index: usize, reason: String },
    #[error("duplicate thesis for ({riddle_id:?}, option {option_index})")]
    DuplicateThesis {
        riddle_id: String,
        option_index: usize,
    },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Original,
    Semantic,
    Context,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Original, Category::Semantic, Category::Context];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, validation or test)")),
        }
    }
}

/// One multiple-choice puzzle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Riddle {
    pub id: String,
    pub question: String,
    pub options: [String; OPTION_COUNT],
    /// Index of the correct option; `None` for unlabeled test data.
    pub label: Option<usize>,
    pub category: Category,
    pub group_id: String,
    pub split: Split,
}

impl Riddle {
    /// Checks the per-record invariants: four non-empty, pairwise distinct
    /// options and an in-range label.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.question.trim().is_empty() {
            return Err(format!("riddle {:?} has an empty question", self.id));
        }
        for (i, option) in self.options.iter().enumerate() {
            if option.trim().is_empty() {
                return Err(format!("riddle {:?} option {i} is empty", self.id));
            }
            if self.options[..i].contains(option) {
                return Err(format!("riddle {:?} option {i} duplicates an earlier option", self.id));
            }
        }
        if let Some(label) = self.label {
            if label >= OPTION_COUNT {
                return Err(format!("riddle {:?} label {label} out of range", self.id));
            }
        }
        if self.group_id.trim().is_empty() {
            return Err(format!("riddle {:?} has an empty group id", self.id));
        }
        Ok(())
    }

    /// Text of the correct option, when labeled.
    pub fn answer(&self) -> Option<&str> {
        self.label.map(|l| self.options[l].as_str())
    }

    /// Copy with the label removed. Prompt construction only ever sees this.
    pub fn without_label(&self) -> Riddle {
        Riddle {
            label: None,
            ..self.clone()
        }
    }
}

/// Group id implied by a BrainTeaser-style riddle id.
pub fn derive_group_id(id: &str) -> &str {
    id.strip_suffix("_SR")
        .or_else(|| id.strip_suffix("_CR"))
        .unwrap_or(id)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRiddle {
    id: String,
    question: String,
    options: Vec<String>,
    #[serde(default)]
    label: Option<i64>,
    category: Category,
    #[serde(default)]
    group_id: Option<String>,
    split: Split,
}

impl RawRiddle {
    fn into_riddle(self) -> Result<Riddle, String> {
        let arity = self.options.len();
        let options: [String; OPTION_COUNT] = self
            .options
            .try_into()
            .map_err(|_| format!("riddle {:?} has {arity} options, expected {OPTION_COUNT}", self.id))?;
        let label = match self.label {
            None => None,
            Some(l) if (0..OPTION_COUNT as i64).contains(&l) => Some(l as usize),
            Some(l) => return Err(format!("riddle {:?} label {l} out of range", self.id)),
        };
        let group_id = match self.group_id {
            Some(g) => g,
            None => derive_group_id(&self.id).to_owned(),
        };
        let riddle = Riddle {
            id: self.id,
            question: self.question,
            options,
            label,
            category: self.category,
            group_id,
            split: self.split,
        };
        riddle.validate()?;
        Ok(riddle)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Report incomplete groups as warnings instead of failing the load.
    pub allow_partial_groups: bool,
}

/// An incomplete reconstruction group tolerated under
/// [`LoadOptions::allow_partial_groups`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWarning {
    pub split: Split,
    pub group_id: String,
    pub reason: String,
}

impl fmt::Display for GroupWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "group {:?} in split {}: {}", self.group_id, self.split, self.reason)
    }
}

/// Borrowed view of one complete reconstruction group.
#[derive(Debug, Clone, Copy)]
pub struct RiddleGroup<'a> {
    pub group_id: &'a str,
    pub original: &'a Riddle,
    pub semantic: &'a Riddle,
    pub context: &'a Riddle,
}

impl<'a> RiddleGroup<'a> {
    /// Members in fixed (Original, Semantic, Context) order.
    pub fn members(&self) -> [&'a Riddle; 3] {
        [self.original, self.semantic, self.context]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub riddles: usize,
    pub mean_question_tokens: f64,
    /// Mean token count of the correct option over labeled riddles.
    pub mean_answer_tokens: f64,
    pub labeled: usize,
    pub per_split: BTreeMap<Split, usize>,
    pub per_category: BTreeMap<Category, usize>,
}

/// Validated, immutable riddle collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    riddles: Vec<Riddle>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus, rejecting incomplete groups.
    pub fn new(riddles: Vec<Riddle>) -> Result<Self> {
        Self::with_options(riddles, &LoadOptions::default()).map(|(c, _)| c)
    }

    pub fn with_options(riddles: Vec<Riddle>, opts: &LoadOptions) -> Result<(Self, Vec<GroupWarning>)> {
        let mut by_id = HashMap::with_capacity(riddles.len());
        for (index, riddle) in riddles.iter().enumerate() {
            riddle
                .validate()
                .map_err(|reason| CorpusError::MalformedRecord { index, reason })?;
            if by_id.insert(riddle.id.clone(), index).is_some() {
                return Err(CorpusError::DuplicateId(riddle.id.clone()));
            }
        }
        let corpus = Corpus { riddles, by_id };
        let mut warnings = Vec::new();
        for split in corpus.splits() {
            let (_, broken) = corpus.partition_groups(split);
            for warning in broken {
                if !opts.allow_partial_groups {
                    return Err(CorpusError::BrokenGroup {
                        split: warning.split,
                        group_id: warning.group_id,
                        reason: warning.reason,
                    });
                }
                log::warn!("{warning}");
                warnings.push(warning);
            }
        }
        Ok((corpus, warnings))
    }

    pub fn riddles(&self) -> &[Riddle] {
        &self.riddles
    }

    pub fn len(&self) -> usize {
        self.riddles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.riddles.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Riddle> {
        self.by_id.get(id).map(|&i| &self.riddles[i])
    }

    /// Riddles of one split, in file order.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Riddle> + '_ {
        self.riddles.iter().filter(move |r| r.split == split)
    }

    /// Splits present in the corpus, in canonical order.
    pub fn splits(&self) -> Vec<Split> {
        let present: HashSet<Split> = self.riddles.iter().map(|r| r.split).collect();
        [Split::Train, Split::Validation, Split::Test]
            .into_iter()
            .filter(|s| present.contains(s))
            .collect()
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        let mut sizes = BTreeMap::new();
        for r in &self.riddles {
            *sizes.entry(r.split).or_insert(0) += 1;
        }
        sizes
    }

    /// Complete groups of a split in order of first appearance, plus a
    /// warning for each group that is missing or repeats a category.
    pub fn partition_groups(&self, split: Split) -> (Vec<RiddleGroup<'_>>, Vec<GroupWarning>) {
        let mut order: Vec<&str> = Vec::new();
        let mut members: HashMap<&str, Vec<&Riddle>> = HashMap::new();
        for r in self.split(split) {
            members
                .entry(r.group_id.as_str())
                .or_insert_with(|| {
                    order.push(r.group_id.as_str());
                    Vec::new()
                })
                .push(r);
        }

        let mut groups = Vec::new();
        let mut broken = Vec::new();
        for group_id in order {
            let rs = &members[group_id];
            let pick = |c: Category| -> Vec<&Riddle> {
                rs.iter().copied().filter(|r| r.category == c).collect()
            };
            let (o, s, c) = (pick(Category::Original), pick(Category::Semantic), pick(Category::Context));
            if o.len() == 1 && s.len() == 1 && c.len() == 1 {
                groups.push(RiddleGroup {
                    group_id,
                    original: o[0],
                    semantic: s[0],
                    context: c[0],
                });
            } else {
                broken.push(GroupWarning {
                    split,
                    group_id: group_id.to_owned(),
                    reason: format!(
                        "expected one original, semantic and context member, found {}/{}/{}",
                        o.len(),
                        s.len(),
                        c.len()
                    ),
                });
            }
        }
        (groups, broken)
    }

    /// All groups of a split, each ordered (Original, Semantic, Context).
    pub fn groups(&self, split: Split) -> Result<Vec<RiddleGroup<'_>>> {
        if self.split(split).next().is_none() {
            return Err(CorpusError::EmptySplit(split));
        }
        let (groups, broken) = self.partition_groups(split);
        match broken.into_iter().next() {
            Some(w) => Err(CorpusError::BrokenGroup {
                split: w.split,
                group_id: w.group_id,
                reason: w.reason,
            }),
            None => Ok(groups),
        }
    }

    /// Token statistics under [`tokenize`].
    pub fn stats(&self) -> Result<CorpusStats> {
        if self.riddles.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let question_tokens: usize = self.riddles.iter().map(|r| tokenize(&r.question).len()).sum();
        let answers: Vec<usize> = self
            .riddles
            .iter()
            .filter_map(|r| r.answer())
            .map(|a| tokenize(a).len())
            .collect();
        let mean_answer_tokens = if answers.is_empty() {
            0.0
        } else {
            answers.iter().sum::<usize>() as f64 / answers.len() as f64
        };
        let mut per_category = BTreeMap::new();
        for r in &self.riddles {
            *per_category.entry(r.category).or_insert(0) += 1;
        }
        Ok(CorpusStats {
            riddles: self.riddles.len(),
            mean_question_tokens: question_tokens as f64 / self.riddles.len() as f64,
            mean_answer_tokens,
            labeled: answers.len(),
            per_split: self.split_sizes(),
            per_category,
        })
    }

    /// Content digest of the canonical JSON encoding.
    pub fn checksum(&self) -> String {
        sha256_hex(serde_json::to_vec(&self.riddles).expect("riddles serialize"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.riddles).expect("riddles serialize")
    }
}

pub fn parse_corpus(json: &str, opts: &LoadOptions) -> Result<(Corpus, Vec<GroupWarning>)> {
    parse_corpus_at(json, Path::new("<memory>"), opts)
}

fn parse_corpus_at(json: &str, path: &Path, opts: &LoadOptions) -> Result<(Corpus, Vec<GroupWarning>)> {
    let records: Vec<serde_json::Value> =
        serde_json::from_str(json).map_err(|source| CorpusError::NotAnArray {
            path: path.to_owned(),
            source,
        })?;
    let riddles = records
        .into_iter()
        .enumerate()
        .map(|(index, value)| {
            serde_json::from_value::<RawRiddle>(value)
                .map_err(|e| e.to_string())
                .and_then(RawRiddle::into_riddle)
                .map_err(|reason| CorpusError::MalformedRecord { index, reason })
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::with_options(riddles, opts)
}

/// Loads and validates a corpus file, rejecting incomplete groups.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    load_corpus_with(path, &LoadOptions::default()).map(|(c, _)| c)
}

pub fn load_corpus_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<(Corpus, Vec<GroupWarning>)> {
    let path = path.as_ref();
    let json = read(path)?;
    parse_corpus_at(&json, path, opts)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), corpus.to_json())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThesisSource {
    Generated,
    HumanRevised,
}

/// A reasoning path from a riddle to one of its options, written without
/// knowledge of which option is correct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThesisRecord {
    pub riddle_id: String,
    pub option_index: usize,
    pub thesis: String,
    pub source: ThesisSource,
}

/// Checks one-record-per-pair, non-empty text and option range.
pub fn validate_theses(theses: &[ThesisRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for (index, t) in theses.iter().enumerate() {
        if t.option_index >= OPTION_COUNT {
            return Err(CorpusError::MalformedThesis {
                index,
                reason: format!("option_index {} out of range", t.option_index),
            });
        }
        if t.thesis.trim().is_empty() {
            return Err(CorpusError::MalformedThesis {
                index,
                reason: format!("empty thesis for riddle {:?}", t.riddle_id),
            });
        }
        if !seen.insert((t.riddle_id.as_str(), t.option_index)) {
            return Err(CorpusError::DuplicateThesis {
                riddle_id: t.riddle_id.clone(),
                option_index: t.option_index,
            });
        }
    }
    Ok(())
}

pub fn load_theses(path: impl AsRef<Path>) -> Result<Vec<ThesisRecord>> {
    let path = path.as_ref();
    let json = read(path)?;
    let records: Vec<serde_json::Value> =
        serde_json::from_str(&json).map_err(|source| CorpusError::NotAnArray {
            path: path.to_owned(),
            source,
        })?;
    let theses = records
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            serde_json::from_value(v).map_err(|e| CorpusError::MalformedThesis {
                index,
                reason: e.to_string(),
            })
        })
        .collect::<Result<Vec<ThesisRecord>>>()?;
    validate_theses(&theses)?;
    Ok(theses)
}

pub fn save_theses(theses: &[ThesisRecord], path: impl AsRef<Path>) -> Result<()> {
    write(
        path.as_ref(),
        serde_json::to_string_pretty(theses).expect("theses serialize"),
    )
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, body: String) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CorpusError::Io {
            path: parent.to_owned(),
            source,
        })?;
    }
    fs::write(path, body).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })
}
