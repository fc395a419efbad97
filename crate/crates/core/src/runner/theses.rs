use std::collections::HashSet;

use rayon::prelude::*;

use super::{Error, Result};
use crate::corpus::{Corpus, CorpusError, Split, ThesisRecord, ThesisSource, OPTION_COUNT};
use crate::prompts::PromptRenderer;
use crate::providers::{GenerationParams, Generator};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThesisFailure {
    pub riddle_id: String,
    pub option_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThesisRun {
    /// `existing` followed by the new records in corpus order.
    pub records: Vec<ThesisRecord>,
    pub generator_calls: usize,
    /// Pairs left for the next invocation.
    pub failures: Vec<ThesisFailure>,
}

/// Generates one thesis per option for every riddle in `split`, skipping
/// `(riddle, option)` pairs already present in `existing`.
pub fn generate_theses(
    corpus: &Corpus,
    split: Split,
    generator: &dyn Generator,
    params: &GenerationParams,
    existing: Vec<ThesisRecord>,
    parallelism: usize,
) -> Result<ThesisRun> {
    let have: HashSet<(&str, usize)> = existing
        .iter()
        .map(|t| (t.riddle_id.as_str(), t.option_index))
        .collect();
    let todo: Vec<_> = corpus
        .split(split)
        .flat_map(|r| (0..OPTION_COUNT).map(move |i| (r, i)))
        .filter(|(r, i)| !have.contains(&(r.id.as_str(), *i)))
        .collect();
    if corpus.split(split).next().is_none() {
        return Err(CorpusError::EmptySplit(split).into());
    }

    let renderer = PromptRenderer::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        todo.par_iter()
            .map(|&(r, option_index)| {
                let prompt = renderer.thesis(&r.without_label(), option_index)?;
                Ok(generator
                    .generate(&prompt.messages, params)
                    .map_err(|e| (r.id.clone(), option_index, e.to_string()))
                    .and_then(|text| {
                        if text.trim().is_empty() {
                            Err((r.id.clone(), option_index, "empty thesis".to_owned()))
                        } else {
                            Ok(ThesisRecord {
                                riddle_id: r.id.clone(),
                                option_index,
                                thesis: text,
                                source: ThesisSource::Generated,
                            })
                        }
                    }))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut records = existing;
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok(record) => records.push(record),
            Err((riddle_id, option_index, error)) => {
                log::warn!("thesis for ({riddle_id}, {option_index}) failed: {error}");
                failures.push(ThesisFailure {
                    riddle_id,
                    option_index,
                    error,
                });
            }
        }
    }
    Ok(ThesisRun {
        records,
        generator_calls: todo.len(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Category, Riddle};
    use crate::providers::{Counted, ScriptedGenerator};

    fn corpus(n: usize) -> Corpus {
        let riddles = (0..n)
            .map(|i| Riddle {
                id: format!("r{i}"),
                question: format!("question {i}"),
                options: ["a".into(), "b".into(), "c".into(), "d".into()],
                label: Some(0),
                category: Category::Original,
                group_id: format!("r{i}"),
                split: Split::Train,
            })
            .collect();
        let opts = crate::corpus::LoadOptions {
            allow_partial_groups: true,
        };
        Corpus::with_options(riddles, &opts).unwrap().0
    }

    #[test]
    fn four_per_riddle_and_resumable() {
        let c = corpus(3);
        let g = Counted::new(ScriptedGenerator::new().with_default("a thesis"));
        let p = GenerationParams::new("m");
        let run = generate_theses(&c, Split::Train, &g, &p, Vec::new(), 2).unwrap();
        assert_eq!(run.records.len(), 12);
        assert_eq!(g.calls(), 12);
        assert_eq!(run.records[5].riddle_id, "r1");
        assert_eq!(run.records[5].option_index, 1);

        let partial: Vec<_> = run.records[..10].to_vec();
        g.reset();
        let resumed = generate_theses(&c, Split::Train, &g, &p, partial, 2).unwrap();
        assert_eq!(g.calls(), 2);
        assert_eq!(resumed.records, run.records);
    }

    #[test]
    fn failures_are_left_for_later() {
        let c = corpus(1);
        let g = ScriptedGenerator::new().fail_when_contains("Option: c").with_default("t");
        let run = generate_theses(&c, Split::Train, &g, &GenerationParams::new("m"), Vec::new(), 1).unwrap();
        assert_eq!(run.records.len(), 3);
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.failures[0].option_index, 2);
    }
}
