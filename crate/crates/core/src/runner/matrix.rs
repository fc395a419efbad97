use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_experiment, Error, ExperimentConfig, Result, RetrievalSection, RunContext};
use crate::evaluation::Metrics;
use crate::prompts::ExplanationMode;
use crate::retrieval::RetrievalVariant;

/// Short tag for the in-context setup: `-` without retrieval, `ord` for
/// plain ordinary retrieval, otherwise letters for explanations (`E`),
/// summarized explanations (`S`), the reranker (`R`) and fusion (`F`).
pub fn retrieval_legend(retrieval: Option<&RetrievalSection>) -> String {
    let Some(r) = retrieval else {
        return "-".into();
    };
    let mut tag = String::new();
    if r.explanation_mode != ExplanationMode::Omitted {
        tag.push('E');
    }
    if r.explanation_mode == ExplanationMode::Summarized {
        tag.push('S');
    }
    match r.variant {
        RetrievalVariant::Ordinary => {}
        RetrievalVariant::Ranked => tag.push('R'),
        RetrievalVariant::Fusion => tag.push('F'),
    }
    if tag.is_empty() {
        "ord".into()
    } else {
        tag
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub strategy: String,
    pub legend: String,
    pub description: String,
    pub fingerprint: String,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub rows: Vec<MatrixRow>,
}

impl MatrixSummary {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// One line per run: thinking method, in-context setup, task
    /// description, then the six metrics in percent.
    pub fn to_table(&self) -> String {
        let w0 = self.rows.iter().map(|r| r.strategy.len()).chain([15]).max().unwrap();
        let w1 = self.rows.iter().map(|r| r.legend.len()).chain([6]).max().unwrap();
        let w2 = self.rows.iter().map(|r| r.description.len()).chain([16]).max().unwrap();
        let mut out = String::new();
        write!(out, "{:<w0$}  {:<w1$}  {:<w2$}", "Thinking Method", "In-Ctx", "Task Description").unwrap();
        for name in Metrics::NAMES {
            write!(out, "  {name:>9}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{:<w0$}  {:<w1$}  {:<w2$}", r.strategy, r.legend, r.description).unwrap();
            match (&r.metrics, &r.error) {
                (Some(m), _) => {
                    for v in m.values() {
                        match v {
                            Some(v) => write!(out, "  {:>9.1}", v * 100.0).unwrap(),
                            None => write!(out, "  {:>9}", "-").unwrap(),
                        }
                    }
                }
                (None, Some(e)) => write!(out, "  FAILED: {e}").unwrap(),
                (None, None) => write!(out, "  (unlabeled split)").unwrap(),
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    #[serde(default)]
    defaults: Option<toml::Table>,
    run: Vec<toml::Table>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses a run list: a `[[run]]` array of experiment configs, each
/// layered over an optional `[defaults]` table.
pub fn parse_matrix(text: &str) -> Result<Vec<ExperimentConfig>> {
    let file: MatrixFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if file.run.is_empty() {
        return Err(Error::Config("matrix has no [[run]] entries".into()));
    }
    file.run
        .into_iter()
        .enumerate()
        .map(|(i, over)| {
            let mut table = file.defaults.clone().unwrap_or_default();
            merge(&mut table, over);
            let config: ExperimentConfig = toml::Value::Table(table)
                .try_into()
                .map_err(|e| Error::Config(format!("run {}: {e}", i + 1)))?;
            config
                .validate()
                .map_err(|e| Error::Config(format!("run {}: {e}", i + 1)))?;
            Ok(config)
        })
        .collect()
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Vec<ExperimentConfig>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(super::io_err(path))?;
    let mut configs = parse_matrix(&text)?;
    if let Some(dir) = path.parent() {
        configs.iter_mut().for_each(|c| c.resolve_paths(dir));
    }
    Ok(configs)
}

/// Runs every config in order through one shared context. A failing run
/// is reported in its row and does not stop the others. With `out_dir`,
/// each run persists under `<out_dir>/<fingerprint prefix>/`.
pub fn run_matrix(configs: &[ExperimentConfig], ctx: &RunContext, out_dir: Option<&Path>) -> Result<MatrixSummary> {
    if configs.is_empty() {
        return Err(Error::Config("matrix has no runs".into()));
    }
    let rows = configs
        .iter()
        .map(|config| {
            let fingerprint = config.fingerprint();
            let dir = out_dir.map(|d| d.join(&fingerprint[..12]));
            let (metrics, error) = match run_experiment(config, ctx, dir.as_deref()) {
                Ok(record) => (record.report.map(|r| r.metrics), None),
                Err(e) => {
                    log::error!("run {}: {e}", &fingerprint[..12]);
                    (None, Some(e.to_string()))
                }
            };
            MatrixRow {
                strategy: config.strategy.label().to_owned(),
                legend: retrieval_legend(config.retrieval.as_ref()),
                description: config.description.label().to_owned(),
                fingerprint,
                metrics,
                error,
            }
        })
        .collect();
    let summary = MatrixSummary { rows };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(super::io_err(dir))?;
        let table = dir.join("matrix.txt");
        fs::write(&table, summary.to_table()).map_err(super::io_err(&table))?;
        let json = dir.join("matrix.json");
        fs::write(&json, serde_json::to_string_pretty(&summary).expect("summary serializes"))
            .map_err(super::io_err(&json))?;
    }
    Ok(summary)
}
