//! Prompt assets, prompt assembly and answer extraction.
//!
//! The task descriptions, the thesis instruction and the two reconstruction
//! prompts live as plain text files under `prompts/` and are compiled in
//! verbatim; `prompts/MANIFEST.sha256` pins their digests.
//!
//! A riddle prompt is laid out as: optional task description (system message
//! by default), retrieved shots, the riddle with options `(A)`-`(D)` in
//! stored order, the strategy cue, and the answer-format instruction.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Riddle, OPTION_COUNT};
use crate::providers::ChatMessage;
use crate::text::sha256_hex;

pub const SIMPLE_DESCRIPTION: &str = include_str!("../prompts/simple.txt");
pub const COMPRESSED_DESCRIPTION: &str = include_str!("../prompts/compressed.txt");
pub const DETAILED_DESCRIPTION: &str = include_str!("../prompts/detailed.txt");
pub const THESIS_INSTRUCTION: &str = include_str!("../prompts/thesis.txt");
pub const SEMANTIC_RECONSTRUCTION: &str = include_str!("../prompts/semantic_reconstruction.txt");
pub const CONTEXT_RECONSTRUCTION: &str = include_str!("../prompts/context_reconstruction.txt");
const MANIFEST: &str = include_str!("../prompts/MANIFEST.sha256");

/// Placeholder substituted in the reconstruction prompts.
pub const RIDDLE_PLACEHOLDER: &str = "{riddle}";

pub const ANSWER_INSTRUCTION: &str = "End your reply with \"Answer: (X)\".";
pub const STEP_BY_STEP_CUE: &str = "Let's think step by step.";
pub const SPECIFIED_STEPS: [&str; 3] = [
    "For each option, find a path between the question and that option.",
    "Judge each path's logical consistency with every fact in the question.",
    "Select the most logical option.",
];

pub const OPTION_LETTERS: [char; OPTION_COUNT] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("external chain-of-thought needs per-option theses; render it with the theses")]
    MissingTheses,
    #[error("expected {expected} theses, one per option, got {got}")]
    ThesisArityMismatch { expected: usize, got: usize },
    #[error("option index {0} out of range")]
    OptionOutOfRange(usize),
    #[error("prompt asset {name} digest {actual} does not match manifest {expected}")]
    AssetDigestMismatch {
        name: String,
        expected: String,
        actual: String,
    },
}

pub type Result<T, E = PromptError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskDescription {
    None,
    Simple,
    Compressed,
    Detailed,
}

impl TaskDescription {
    pub const ALL: [TaskDescription; 4] = [
        TaskDescription::None,
        TaskDescription::Simple,
        TaskDescription::Compressed,
        TaskDescription::Detailed,
    ];

    /// Prompt body; empty for `None`.
    pub fn text(self) -> &'static str {
        match self {
            TaskDescription::None => "",
            TaskDescription::Simple => SIMPLE_DESCRIPTION,
            TaskDescription::Compressed => COMPRESSED_DESCRIPTION,
            TaskDescription::Detailed => DETAILED_DESCRIPTION,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TaskDescription::None => "None",
            TaskDescription::Simple => "Simple",
            TaskDescription::Compressed => "Compressed",
            TaskDescription::Detailed => "Detailed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Direct,
    SimpleInternalCot,
    SpecifiedInternalCot,
    ExternalCot,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Direct,
        Strategy::SimpleInternalCot,
        Strategy::SpecifiedInternalCot,
        Strategy::ExternalCot,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Direct => "Direct",
            Strategy::SimpleInternalCot => "Simple-Internal-CoT",
            Strategy::SpecifiedInternalCot => "Specified-Internal-CoT",
            Strategy::ExternalCot => "External-CoT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplanationMode {
    #[default]
    Omitted,
    Full,
    Summarized,
}

/// One in-context example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotBlock {
    pub question: String,
    pub answer: String,
    pub explanation: Option<String>,
    /// `Summarized` only when the explanation was actually shortened.
    pub explanation_mode: ExplanationMode,
}

impl ShotBlock {
    pub fn bare(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
            explanation: None,
            explanation_mode: ExplanationMode::Omitted,
        }
    }

    fn render(&self) -> String {
        let mut s = format!("Question: {}\nAnswer: {}", self.question, self.answer);
        if let Some(e) = &self.explanation {
            s.push_str("\nExplanation: ");
            s.push_str(e);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionPlacement {
    /// Task description sent as a system message.
    #[default]
    System,
    /// Task description prepended to the user message.
    Inline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub messages: Vec<ChatMessage>,
    pub strategy: Option<Strategy>,
    pub description: TaskDescription,
    pub shot_count: usize,
}

impl RenderedPrompt {
    /// All message contents joined by blank lines.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

/// Pure prompt assembly.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptRenderer {
    pub placement: DescriptionPlacement,
}

impl PromptRenderer {
    pub fn new(placement: DescriptionPlacement) -> Self {
        Self { placement }
    }

    /// Final prompt for the single-inference strategies.
    pub fn riddle(
        &self,
        riddle: &Riddle,
        strategy: Strategy,
        description: TaskDescription,
        shots: &[ShotBlock],
    ) -> Result<RenderedPrompt> {
        let cue = match strategy {
            Strategy::Direct => None,
            Strategy::SimpleInternalCot => Some(STEP_BY_STEP_CUE.to_owned()),
            Strategy::SpecifiedInternalCot => Some(specified_steps()),
            Strategy::ExternalCot => return Err(PromptError::MissingTheses),
        };
        let mut body = riddle_block(riddle, None);
        if let Some(cue) = cue {
            body.push_str("\n\n");
            body.push_str(&cue);
        }
        Ok(self.assemble(Some(strategy), description, shots, body))
    }

    /// Final external chain-of-thought prompt: each option followed by the
    /// thesis generated for it.
    pub fn final_with_theses(
        &self,
        riddle: &Riddle,
        theses: &[String],
        description: TaskDescription,
        shots: &[ShotBlock],
    ) -> Result<RenderedPrompt> {
        if theses.len() != OPTION_COUNT {
            return Err(PromptError::ThesisArityMismatch {
                expected: OPTION_COUNT,
                got: theses.len(),
            });
        }
        let mut body = riddle_block(riddle, Some(theses));
        body.push_str(
            "\n\nEach option is followed by a context describing a thinking path from the question to \
             that option. Use these contexts to solve the riddle.",
        );
        Ok(self.assemble(Some(Strategy::ExternalCot), description, shots, body))
    }

    fn assemble(
        &self,
        strategy: Option<Strategy>,
        description: TaskDescription,
        shots: &[ShotBlock],
        riddle_body: String,
    ) -> RenderedPrompt {
        let mut messages = Vec::with_capacity(2);
        let mut sections: Vec<String> = Vec::with_capacity(shots.len() + 3);
        if description != TaskDescription::None {
            match self.placement {
                DescriptionPlacement::System => messages.push(ChatMessage::system(description.text())),
                DescriptionPlacement::Inline => sections.push(description.text().to_owned()),
            }
        }
        sections.extend(shots.iter().map(ShotBlock::render));
        sections.push(riddle_body);
        sections.push(ANSWER_INSTRUCTION.to_owned());
        messages.push(ChatMessage::user(sections.join("\n\n")));
        RenderedPrompt {
            messages,
            strategy,
            description,
            shot_count: shots.len(),
        }
    }

    /// Thesis-generation prompt for one option. The label is never read.
    pub fn thesis(&self, riddle: &Riddle, option_index: usize) -> Result<RenderedPrompt> {
        let option = riddle
            .options
            .get(option_index)
            .ok_or(PromptError::OptionOutOfRange(option_index))?;
        Ok(single_user(thesis_body(&riddle.question, option)))
    }

    pub fn semantic_reconstruction(&self, riddle_text: &str) -> RenderedPrompt {
        single_user(SEMANTIC_RECONSTRUCTION.replacen(RIDDLE_PLACEHOLDER, riddle_text, 1))
    }

    pub fn context_reconstruction(&self, riddle_text: &str) -> RenderedPrompt {
        single_user(CONTEXT_RECONSTRUCTION.replacen(RIDDLE_PLACEHOLDER, riddle_text, 1))
    }
}

/// Thesis instruction followed by the question and the single option.
pub fn thesis_body(question: &str, option: &str) -> String {
    format!("{THESIS_INSTRUCTION}\n\nQuestion: {question}\nOption: {option}")
}

fn single_user(body: String) -> RenderedPrompt {
    RenderedPrompt {
        messages: vec![ChatMessage::user(body)],
        strategy: None,
        description: TaskDescription::None,
        shot_count: 0,
    }
}

fn specified_steps() -> String {
    let mut s = String::from("Follow these steps:");
    for (i, step) in SPECIFIED_STEPS.iter().enumerate() {
        s.push_str(&format!("\n{}. {step}", i + 1));
    }
    s
}

fn riddle_block(riddle: &Riddle, theses: Option<&[String]>) -> String {
    let mut s = format!("Question: {}\nOptions:", riddle.question);
    for (i, option) in riddle.options.iter().enumerate() {
        s.push_str(&format!("\n({}) {option}", OPTION_LETTERS[i]));
        if let Some(theses) = theses {
            s.push_str("\nContext: ");
            s.push_str(&theses[i]);
        }
    }
    s
}

pub fn render_riddle_prompt(
    riddle: &Riddle,
    strategy: Strategy,
    description: TaskDescription,
    shots: &[ShotBlock],
) -> Result<RenderedPrompt> {
    PromptRenderer::default().riddle(riddle, strategy, description, shots)
}

pub fn render_final_with_theses(
    riddle: &Riddle,
    theses: &[String],
    description: TaskDescription,
) -> Result<RenderedPrompt> {
    PromptRenderer::default().final_with_theses(riddle, theses, description, &[])
}

pub fn render_thesis_prompt(riddle: &Riddle, option_index: usize) -> Result<RenderedPrompt> {
    PromptRenderer::default().thesis(riddle, option_index)
}

pub fn render_sr_prompt(riddle: &Riddle) -> RenderedPrompt {
    PromptRenderer::default().semantic_reconstruction(&riddle.question)
}

pub fn render_cr_prompt(riddle: &Riddle) -> RenderedPrompt {
    PromptRenderer::default().context_reconstruction(&riddle.question)
}

/// Extracts the chosen option from a completion; `None` means abstain.
///
/// Rules, first match wins:
/// 1. the last `Answer: (X)` with X in A-D;
/// 2. the last parenthesized letter `(X)` not glued to a word;
/// 3. the option whose full text (case-insensitive) ends latest in the
///    completion, preferring the longer option on a tie;
/// 4. abstain.
pub fn parse_answer(completion: &str, options: &[String]) -> Option<usize> {
    static ANSWER: OnceLock<Regex> = OnceLock::new();
    let answer = ANSWER.get_or_init(|| Regex::new(r"(?i:answer)\s*:\s*\(([A-D])\)").expect("valid regex"));
    if let Some(caps) = answer.captures_iter(completion).last() {
        return letter_index(&caps[1]);
    }
    if let Some(i) = last_standalone_letter(completion) {
        return Some(i);
    }
    let haystack = completion.to_lowercase();
    options
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.trim().is_empty())
        .filter_map(|(i, o)| {
            let needle = o.to_lowercase();
            haystack.rfind(&needle).map(|pos| (pos + needle.len(), needle.len(), i))
        })
        .max_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(b.2.cmp(&a.2)))
        .map(|(_, _, i)| i)
}

fn letter_index(letter: &str) -> Option<usize> {
    OPTION_LETTERS.iter().position(|l| letter.starts_with(*l))
}

fn last_standalone_letter(text: &str) -> Option<usize> {
    let bytes = text.as_bytes();
    let glued = |b: Option<&u8>| b.is_some_and(|b| b.is_ascii_alphanumeric());
    (0..bytes.len().saturating_sub(2))
        .rev()
        .find(|&i| {
            bytes[i] == b'('
                && (b'A'..=b'D').contains(&bytes[i + 1])
                && bytes[i + 2] == b')'
                && !glued(i.checked_sub(1).map(|j| &bytes[j]))
                && !glued(bytes.get(i + 3))
        })
        .map(|i| (bytes[i + 1] - b'A') as usize)
}

/// `(file name, body)` of every shipped prompt asset.
pub fn assets() -> [(&'static str, &'static str); 6] {
    [
        ("simple.txt", SIMPLE_DESCRIPTION),
        ("compressed.txt", COMPRESSED_DESCRIPTION),
        ("detailed.txt", DETAILED_DESCRIPTION),
        ("thesis.txt", THESIS_INSTRUCTION),
        ("semantic_reconstruction.txt", SEMANTIC_RECONSTRUCTION),
        ("context_reconstruction.txt", CONTEXT_RECONSTRUCTION),
    ]
}

/// Checks every asset against `prompts/MANIFEST.sha256`.
pub fn verify_assets() -> Result<()> {
    for (name, body) in assets() {
        let expected = MANIFEST
            .lines()
            .find_map(|l| {
                let (digest, file) = l.split_once("  ")?;
                (file.trim() == name).then(|| digest.to_owned())
            })
            .unwrap_or_default();
        let actual = sha256_hex(body);
        if actual != expected {
            return Err(PromptError::AssetDigestMismatch {
                name: name.into(),
                expected,
                actual,
            });
        }
    }
    Ok(())
}
