use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Error, Result};
use crate::corpus::{Corpus, Split, ThesisRecord, ThesisSource, OPTION_COUNT};
use crate::prompts::thesis_body;
use crate::providers::{ChatMessage, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneFormat {
    /// `{"prompt", "completion", ...}`
    #[default]
    Completion,
    /// `{"messages": [user, assistant], ...}`
    Chat,
}

/// One exported line. Only one of `prompt`/`completion` or `messages` is
/// set, depending on the format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub messages: Option<Vec<ChatMessage>>,
    pub riddle_id: String,
    pub option_index: usize,
    pub source: ThesisSource,
}

/// Emits one instruction-tuning record per thesis of the riddles in
/// `split` (all riddles when `None`) as JSON Lines. Every option of every
/// requested riddle needs a thesis. Records never carry the label.
pub fn export_finetune(
    theses: &[ThesisRecord],
    corpus: &Corpus,
    split: Option<Split>,
    format: FinetuneFormat,
) -> Result<String> {
    let requested: Vec<_> = corpus
        .riddles()
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .collect();
    let wanted: HashSet<&str> = requested.iter().map(|r| r.id.as_str()).collect();
    let have: HashSet<(&str, usize)> = theses
        .iter()
        .map(|t| (t.riddle_id.as_str(), t.option_index))
        .collect();
    let missing: Vec<(String, usize)> = requested
        .iter()
        .flat_map(|r| (0..OPTION_COUNT).map(move |i| (r.id.as_str(), i)))
        .filter(|pair| !have.contains(pair))
        .map(|(id, i)| (id.to_owned(), i))
        .collect();
    if !missing.is_empty() {
        return Err(Error::CoverageGap(missing));
    }

    let mut out = String::new();
    for t in theses.iter().filter(|t| wanted.contains(t.riddle_id.as_str())) {
        let riddle = corpus.get(&t.riddle_id).expect("requested riddle");
        let option = riddle
            .options
            .get(t.option_index)
            .ok_or(crate::prompts::PromptError::OptionOutOfRange(t.option_index))?;
        let prompt = thesis_body(&riddle.question, option);
        let record = match format {
            FinetuneFormat::Completion => FinetuneRecord {
                prompt: Some(prompt),
                completion: Some(t.thesis.clone()),
                messages: None,
                riddle_id: t.riddle_id.clone(),
                option_index: t.option_index,
                source: t.source,
            },
            FinetuneFormat::Chat => FinetuneRecord {
                prompt: None,
                completion: None,
                messages: Some(vec![ChatMessage::user(prompt), ChatMessage::assistant(t.thesis.clone())]),
                riddle_id: t.riddle_id.clone(),
                option_index: t.option_index,
                source: t.source,
            },
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

/// Reads an export back into thesis records.
pub fn parse_finetune(jsonl: &str) -> Result<Vec<ThesisRecord>> {
    let mut out = Vec::new();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::MalformedExport { line: i + 1, reason };
        let r: FinetuneRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let thesis = match (r.completion, r.messages) {
            (Some(c), None) => c,
            (None, Some(m)) => m
                .into_iter()
                .rev()
                .find(|m| m.role == Role::Assistant)
                .map(|m| m.content)
                .ok_or_else(|| bad("no assistant message".into()))?,
            _ => return Err(bad("expected either completion or messages".into())),
        };
        out.push(ThesisRecord {
            riddle_id: r.riddle_id,
            option_index: r.option_index,
            thesis,
            source: r.source,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Category, Riddle};

    fn setup() -> (Corpus, Vec<ThesisRecord>) {
        let riddles: Vec<Riddle> = (0..2)
            .map(|i| Riddle {
                id: format!("r{i}"),
                question: format!("question {i}"),
                options: ["a".into(), "b".into(), "c".into(), "d".into()],
                label: Some(i),
                category: Category::Original,
                group_id: format!("r{i}"),
                split: Split::Train,
            })
            .collect();
        let opts = crate::corpus::LoadOptions {
            allow_partial_groups: true,
        };
        let corpus = Corpus::with_options(riddles, &opts).unwrap().0;
        let theses = (0..2)
            .flat_map(|r| {
                (0..4).map(move |o| ThesisRecord {
                    riddle_id: format!("r{r}"),
                    option_index: o,
                    thesis: format!("path {r}-{o}"),
                    source: if o == 3 {
                        ThesisSource::HumanRevised
                    } else {
                        ThesisSource::Generated
                    },
                })
            })
            .collect();
        (corpus, theses)
    }

    #[test]
    fn arity_leakage_and_round_trip() {
        let (corpus, theses) = setup();
        for format in [FinetuneFormat::Completion, FinetuneFormat::Chat] {
            let out = export_finetune(&theses, &corpus, None, format).unwrap();
            assert_eq!(out.lines().count(), 8);
            for line in out.lines() {
                let v: serde_json::Value = serde_json::from_str(line).unwrap();
                assert!(v.get("label").is_none());
            }
            assert_eq!(parse_finetune(&out).unwrap(), theses);
        }
    }

    #[test]
    fn coverage_gap_lists_pairs() {
        let (corpus, mut theses) = setup();
        theses.remove(6);
        match export_finetune(&theses, &corpus, Some(Split::Train), FinetuneFormat::Completion) {
            Err(Error::CoverageGap(missing)) => assert_eq!(missing, [("r1".to_string(), 2)]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
