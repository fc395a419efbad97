//! Instance and group scoring, report diffs, and the grouped retrieval
//! hit-rate benchmark.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Category, Corpus, CorpusError, Split};
use crate::retrieval::{RetrievalConfig, RetrievalError, RetrievalVariant, ShotSelector};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction for riddle {0:?}")]
    MissingPrediction(String),
    #[error("more than one prediction for riddle {0:?}")]
    DuplicatePrediction(String),
    #[error("prediction for riddle {riddle_id:?}, which is not in split {split}")]
    UnknownPrediction { riddle_id: String, split: Split },
    #[error("riddle {riddle_id:?} in split {split} has no label")]
    UnlabeledSplit { riddle_id: String, split: Split },
    #[error("prediction for {riddle_id:?} picks option {index}, out of range")]
    OptionOutOfRange { riddle_id: String, index: usize },
    #[error("reports have different shapes: {0}")]
    ShapeMismatch(String),
    #[error("{path} line {line}: {reason}")]
    MalformedPrediction { path: PathBuf, line: usize, reason: String },
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// One model answer. `predicted_index: None` is an abstention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub riddle_id: String,
    pub predicted_index: Option<usize>,
    pub raw_completion: String,
    pub config_fingerprint: String,
    /// Provider failure that forced an abstention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Serializes predictions as JSON Lines, one object per line.
pub fn predictions_to_jsonl(predictions: &[Prediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

pub fn save_predictions(predictions: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, predictions_to_jsonl(predictions)).map_err(|source| EvalError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let io = |source| EvalError::Io {
        path: path.to_owned(),
        source,
    };
    let file = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| EvalError::MalformedPrediction {
                path: path.to_owned(),
                line: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Correct over total for one cell of the report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }
}

/// The six headline metrics. Category and group metrics are `None` when
/// the split has no instances of that category or its groups are not all
/// complete.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ori: Option<f64>,
    pub sem: Option<f64>,
    pub con: Option<f64>,
    pub ori_sem: Option<f64>,
    pub ori_sem_con: Option<f64>,
    pub overall: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 6] = ["Ori", "Sem", "Con", "Ori&Sem", "OriSemCon", "Overall"];

    pub fn values(&self) -> [Option<f64>; 6] {
        [
            self.ori,
            self.sem,
            self.con,
            self.ori_sem,
            self.ori_sem_con,
            Some(self.overall),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub split: Split,
    pub metrics: Metrics,
    pub overall: Tally,
    pub abstained: usize,
    pub per_category: BTreeMap<Category, Tally>,
    /// Groups with Original and Semantic both correct, over complete groups.
    pub ori_sem_groups: Tally,
    /// Groups with all three members correct, over complete groups.
    pub all_groups: Tally,
    /// Groups excluded from group metrics because they are incomplete.
    pub incomplete_groups: usize,
}

/// Scores `predictions` against the labels of `split`. Every riddle in
/// the split needs exactly one prediction; abstentions count as wrong.
pub fn score(predictions: &[Prediction], corpus: &Corpus, split: Split) -> Result<ScoreReport> {
    let riddles: Vec<_> = corpus.split(split).collect();
    if riddles.is_empty() {
        return Err(CorpusError::EmptySplit(split).into());
    }
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        match corpus.get(&p.riddle_id) {
            Some(r) if r.split == split => {}
            _ => {
                return Err(EvalError::UnknownPrediction {
                    riddle_id: p.riddle_id.clone(),
                    split,
                })
            }
        }
        if by_id.insert(&p.riddle_id, p).is_some() {
            return Err(EvalError::DuplicatePrediction(p.riddle_id.clone()));
        }
    }

    let mut correct: HashMap<&str, bool> = HashMap::with_capacity(riddles.len());
    let mut overall = Tally::default();
    let mut abstained = 0;
    let mut per_category: BTreeMap<Category, Tally> = BTreeMap::new();
    for r in &riddles {
        let label = r.label.ok_or_else(|| EvalError::UnlabeledSplit {
            riddle_id: r.id.clone(),
            split,
        })?;
        let p = by_id
            .get(r.id.as_str())
            .ok_or_else(|| EvalError::MissingPrediction(r.id.clone()))?;
        if let Some(index) = p.predicted_index.filter(|&i| i >= r.options.len()) {
            return Err(EvalError::OptionOutOfRange {
                riddle_id: r.id.clone(),
                index,
            });
        }
        abstained += usize::from(p.predicted_index.is_none());
        let ok = p.predicted_index == Some(label);
        correct.insert(&r.id, ok);
        overall.add(ok);
        per_category.entry(r.category).or_default().add(ok);
    }

    let (groups, broken) = corpus.partition_groups(split);
    let mut ori_sem_groups = Tally::default();
    let mut all_groups = Tally::default();
    for g in &groups {
        let [o, s, c] = g.members().map(|r| correct[r.id.as_str()]);
        ori_sem_groups.add(o && s);
        all_groups.add(o && s && c);
    }
    let group_rate = |t: &Tally| if broken.is_empty() { t.rate() } else { None };
    let cat = |c: Category| per_category.get(&c).and_then(Tally::rate);

    Ok(ScoreReport {
        split,
        metrics: Metrics {
            ori: cat(Category::Original),
            sem: cat(Category::Semantic),
            con: cat(Category::Context),
            ori_sem: group_rate(&ori_sem_groups),
            ori_sem_con: group_rate(&all_groups),
            overall: overall.rate().expect("split is non-empty"),
        },
        overall,
        abstained,
        per_category,
        ori_sem_groups,
        all_groups,
        incomplete_groups: broken.len(),
    })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{:.3}", v))
}

impl ScoreReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table of metrics and counts.
    pub fn to_table(&self) -> String {
        let tally = |t: Option<&Tally>| t.map_or_else(|| "-".to_owned(), |t| format!("{}/{}", t.correct, t.total));
        let counts = [
            tally(self.per_category.get(&Category::Original)),
            tally(self.per_category.get(&Category::Semantic)),
            tally(self.per_category.get(&Category::Context)),
            tally(Some(&self.ori_sem_groups)),
            tally(Some(&self.all_groups)),
            tally(Some(&self.overall)),
        ];
        let mut out = String::new();
        writeln!(out, "{:<10} {:>8} {:>9}", "metric", "score", "count").unwrap();
        for ((name, value), count) in Metrics::NAMES.iter().zip(self.metrics.values()).zip(counts) {
            writeln!(out, "{:<10} {:>8} {:>9}", name, fmt_metric(value), count).unwrap();
        }
        writeln!(out, "split: {}  abstained: {}", self.split, self.abstained).unwrap();
        if self.incomplete_groups > 0 {
            writeln!(
                out,
                "group metrics suppressed: {} incomplete groups",
                self.incomplete_groups
            )
            .unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `a - b`, when both sides are defined.
    pub delta: Option<f64>,
    pub flagged: bool,
}

/// Per-metric `a - b`. Deltas whose magnitude exceeds `threshold` are
/// flagged. Both reports must cover the same split shape.
pub fn diff_reports(a: &ScoreReport, b: &ScoreReport, threshold: f64) -> Result<Vec<MetricDelta>> {
    let totals = |r: &ScoreReport| {
        (
            r.overall.total,
            r.per_category.iter().map(|(c, t)| (*c, t.total)).collect::<Vec<_>>(),
            r.all_groups.total,
        )
    };
    if totals(a) != totals(b) {
        return Err(EvalError::ShapeMismatch(format!(
            "{} instances vs {} instances",
            a.overall.total, b.overall.total
        )));
    }
    Ok(Metrics::NAMES
        .iter()
        .zip(a.metrics.values().into_iter().zip(b.metrics.values()))
        .map(|(name, (x, y))| {
            let delta = x.zip(y).map(|(x, y)| x - y);
            MetricDelta {
                metric: (*name).to_owned(),
                a: x,
                b: y,
                delta,
                flagged: delta.is_some_and(|d| d.abs() > threshold),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHits {
    pub riddle_id: String,
    pub retrieved: Vec<String>,
    /// Retrieved riddles from the query's own group, self included.
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateReport {
    pub variant: RetrievalVariant,
    pub k: usize,
    pub per_query: Vec<QueryHits>,
    pub hit_rate: f64,
}

/// Runs the selector's pipeline for each riddle of the index split (the
/// first `query_limit` when given) with self-retrieval allowed and `k`
/// final results, scoring one point per retrieved member of the query's
/// group. `hit_rate = points / (3 * queries)`.
pub fn hit_rate_benchmark(
    selector: &ShotSelector<'_>,
    corpus: &Corpus,
    k: usize,
    query_limit: Option<usize>,
) -> Result<HitRateReport> {
    let split = selector.index.split();
    corpus.groups(split)?;
    let config = RetrievalConfig {
        shots: k,
        ranked_pool: selector.config.ranked_pool.max(k),
        fusion_keep: k,
        exclude_self: false,
        ..selector.config.clone()
    };
    config.validate()?;
    let selector = ShotSelector {
        config: &config,
        ..*selector
    };
    let queries: Vec<_> = corpus.split(split).take(query_limit.unwrap_or(usize::MAX)).collect();
    let per_query = queries
        .par_iter()
        .map(|r| {
            let shots = selector.select(&r.id, &r.question)?.shots;
            let retrieved: Vec<String> = shots.into_iter().map(|s| s.riddle_id).collect();
            let points = retrieved
                .iter()
                .filter(|id| corpus.get(id).is_some_and(|m| m.group_id == r.group_id))
                .count();
            Ok(QueryHits {
                riddle_id: r.id.clone(),
                retrieved,
                points,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let points: usize = per_query.iter().map(|q| q.points).sum();
    let hit_rate = if per_query.is_empty() {
        0.0
    } else {
        points as f64 / (3 * per_query.len()) as f64
    };
    Ok(HitRateReport {
        variant: config.variant,
        k,
        per_query,
        hit_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Riddle;

    fn group(n: usize) -> Vec<Riddle> {
        [("", Category::Original), ("_SR", Category::Semantic), ("_CR", Category::Context)]
            .into_iter()
            .map(|(suffix, category)| Riddle {
                id: format!("g{n}{suffix}"),
                question: format!("question {n}{suffix}"),
                options: ["a".into(), "b".into(), "c".into(), "d".into()],
                label: Some(1),
                category,
                group_id: format!("g{n}"),
                split: Split::Test,
            })
            .collect()
    }

    fn pred(id: &str, index: Option<usize>) -> Prediction {
        Prediction {
            riddle_id: id.into(),
            predicted_index: index,
            raw_completion: String::new(),
            config_fingerprint: "f".into(),
            error: None,
        }
    }

    #[test]
    fn all_correct_is_one() {
        let corpus = Corpus::new((0..3).flat_map(group).collect()).unwrap();
        let preds: Vec<_> = corpus.riddles().iter().map(|r| pred(&r.id, Some(1))).collect();
        let m = score(&preds, &corpus, Split::Test).unwrap().metrics;
        assert_eq!(m.values(), [Some(1.0); 6]);
    }

    #[test]
    fn only_original_correct() {
        let corpus = Corpus::new(group(0)).unwrap();
        let preds = vec![pred("g0", Some(1)), pred("g0_SR", Some(0)), pred("g0_CR", None)];
        let r = score(&preds, &corpus, Split::Test).unwrap();
        let m = r.metrics;
        assert_eq!((m.ori, m.sem, m.con), (Some(1.0), Some(0.0), Some(0.0)));
        assert_eq!((m.ori_sem, m.ori_sem_con), (Some(0.0), Some(0.0)));
        assert!((m.overall - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.abstained, 1);
    }

    #[test]
    fn scoring_errors() {
        let corpus = Corpus::new(group(0)).unwrap();
        let two = vec![pred("g0", Some(1)), pred("g0_SR", Some(1))];
        assert!(matches!(
            score(&two, &corpus, Split::Test),
            Err(EvalError::MissingPrediction(id)) if id == "g0_CR"
        ));
        let mut dup = two.clone();
        dup.push(pred("g0", Some(1)));
        assert!(matches!(
            score(&dup, &corpus, Split::Test),
            Err(EvalError::DuplicatePrediction(_))
        ));
        let unknown = vec![pred("nope", Some(1))];
        assert!(matches!(
            score(&unknown, &corpus, Split::Test),
            Err(EvalError::UnknownPrediction { .. })
        ));

        let mut rs = group(1);
        rs[2].label = None;
        let corpus = Corpus::new(rs).unwrap();
        let preds: Vec<_> = corpus.riddles().iter().map(|r| pred(&r.id, Some(1))).collect();
        assert!(matches!(
            score(&preds, &corpus, Split::Test),
            Err(EvalError::UnlabeledSplit { .. })
        ));
    }

    #[test]
    fn partial_groups_suppress_group_metrics() {
        let mut rs = group(0);
        rs.truncate(1);
        let opts = crate::corpus::LoadOptions {
            allow_partial_groups: true,
        };
        let (corpus, _) = Corpus::with_options(rs, &opts).unwrap();
        let r = score(&[pred("g0", Some(1))], &corpus, Split::Test).unwrap();
        assert_eq!(r.metrics.ori, Some(1.0));
        assert_eq!(r.metrics.sem, None);
        assert_eq!(r.metrics.ori_sem, None);
        assert_eq!(r.incomplete_groups, 1);
        assert!(r.to_table().contains("suppressed"));
    }

    #[test]
    fn diff_arithmetic_and_shape() {
        let corpus = Corpus::new((0..2).flat_map(group).collect()).unwrap();
        let right: Vec<_> = corpus.riddles().iter().map(|r| pred(&r.id, Some(1))).collect();
        let a = score(&right, &corpus, Split::Test).unwrap();
        let d = diff_reports(&a, &a, 0.0).unwrap();
        assert!(d.iter().all(|m| m.delta == Some(0.0) && !m.flagged));

        let mut a2 = a.clone();
        let mut b2 = a.clone();
        a2.metrics.overall = 0.85;
        b2.metrics.overall = 0.725;
        let d = diff_reports(&a2, &b2, 0.1).unwrap();
        assert!((d[5].delta.unwrap() - 0.125).abs() < 1e-12);
        assert!(d[5].flagged);

        let small = Corpus::new(group(0)).unwrap();
        let preds: Vec<_> = small.riddles().iter().map(|r| pred(&r.id, Some(1))).collect();
        let b = score(&preds, &small, Split::Test).unwrap();
        assert!(matches!(diff_reports(&a, &b, 0.0), Err(EvalError::ShapeMismatch(_))));
    }

    #[test]
    fn predictions_jsonl_round_trip() {
        let mut preds = vec![pred("a", Some(2)), pred("b", None)];
        preds[1].error = Some("backend down".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        save_predictions(&preds, &path).unwrap();
        assert_eq!(load_predictions(&path).unwrap(), preds);
        let line = predictions_to_jsonl(&preds[..1]);
        assert_eq!(
            line,
            "{\"riddle_id\":\"a\",\"predicted_index\":2,\"raw_completion\":\"\",\"config_fingerprint\":\"f\"}\n"
        );
    }
}
