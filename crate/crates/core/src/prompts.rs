//! Prompt templates and rendering.
//!
//! Template bodies live under `templates/` as golden files and are embedded at
//! compile time. Placeholders use the grammar `{name}` with `name` matching
//! `[a-z_]+`; anything else between braces is literal text. Substitution is a
//! single pass, so substituted values are never re-scanned.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::VqaSample;
use crate::text::choice_label;

const POSITIVE: &str = include_str!("../templates/positive.txt");
const NEGATIVE_GENERATION: &str = include_str!("../templates/negative_generation.txt");
const CAPTION_FREE: &str = include_str!("../templates/caption_free.txt");
const STAR_RATIONALIZATION: &str = include_str!("../templates/star_rationalization.txt");
const DIRECT_VQA: &str = include_str!("../templates/direct_vqa.txt");
const COT: &str = include_str!("../templates/cot.txt");

/// The line of the negative template that reveals the gold answer.
const GOLD_LINE_PREFIX: &str = "The correct choice is {correct_choice}.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    Positive,
    NegativeGeneration,
    NegativeTraining,
    CaptionFree,
    StarRationalization,
    Cot,
    DirectVqa,
    DirectSft,
}

impl TemplateName {
    pub const ALL: [TemplateName; 8] = [
        TemplateName::Positive,
        TemplateName::NegativeGeneration,
        TemplateName::NegativeTraining,
        TemplateName::CaptionFree,
        TemplateName::StarRationalization,
        TemplateName::Cot,
        TemplateName::DirectVqa,
        TemplateName::DirectSft,
    ];
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{0} choices exceed the 26-letter label alphabet")]
    TooManyChoices(usize),
    #[error("choice index {index} out of range for {len} choices")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("distractor index {0} is the gold answer")]
    DistractorIsGold(usize),
    #[error("no value supplied for placeholder `{{{0}}}`")]
    MissingValue(String),
    #[error("value supplied for unknown placeholder `{{{0}}}`")]
    UnknownPlaceholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot(String),
}

/// A parsed template body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    body: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn parse(name: TemplateName, body: impl Into<String>) -> Self {
        let body = body.into();
        let pieces = split_pieces(&body);
        Self { name, body, pieces }
    }

    pub fn builtin(name: TemplateName) -> Self {
        let body = match name {
            TemplateName::Positive => POSITIVE.to_string(),
            TemplateName::NegativeGeneration => NEGATIVE_GENERATION.to_string(),
            TemplateName::NegativeTraining => without_gold_line(NEGATIVE_GENERATION),
            TemplateName::CaptionFree => CAPTION_FREE.to_string(),
            TemplateName::StarRationalization => STAR_RATIONALIZATION.to_string(),
            TemplateName::Cot => COT.to_string(),
            // Direct SFT trains on the same direct-answer prompt used for zero-shot eval.
            TemplateName::DirectVqa | TemplateName::DirectSft => DIRECT_VQA.to_string(),
        };
        Self::parse(name, body)
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(n) => Some(n.as_str()),
                Piece::Literal(_) => None,
            })
            .collect()
    }

    /// Substitutes every placeholder. The value set must match the
    /// placeholder set exactly.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let names = self.placeholders();
        if let Some(extra) = values.keys().find(|k| !names.contains(*k)) {
            return Err(PromptError::UnknownPlaceholder(extra.to_string()));
        }
        let mut out = String::with_capacity(self.body.len() + 64);
        for piece in &self.pieces {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(n) => out.push_str(
                    values
                        .get(n.as_str())
                        .ok_or_else(|| PromptError::MissingValue(n.clone()))?,
                ),
            }
        }
        Ok(out)
    }
}

fn is_placeholder_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
}

fn split_pieces(body: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut literal = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                literal.push_str(&rest[..open]);
                if !literal.is_empty() {
                    pieces.push(Piece::Literal(std::mem::take(&mut literal)));
                }
                pieces.push(Piece::Slot(after[..close].to_string()));
                rest = &after[close + 1..];
            }
            _ => {
                literal.push_str(&rest[..=open]);
                rest = after;
            }
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        pieces.push(Piece::Literal(literal));
    }
    pieces
}

fn without_gold_line(body: &str) -> String {
    body.split('\n')
        .filter(|line| !line.starts_with(GOLD_LINE_PREFIX))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `"(L) text"` for a choice index.
pub fn format_choice(sample: &VqaSample, index: usize) -> Result<String, PromptError> {
    let len = sample.choices.len();
    let text = sample
        .choices
        .get(index)
        .ok_or(PromptError::IndexOutOfRange { index, len })?;
    let label = choice_label(index).ok_or(PromptError::TooManyChoices(len))?;
    Ok(format!("({label}) {text}"))
}

/// The question followed by one `(L) text` line per choice.
pub fn question_and_choices(sample: &VqaSample) -> Result<String, PromptError> {
    if sample.choices.len() > 26 {
        return Err(PromptError::TooManyChoices(sample.choices.len()));
    }
    let mut out = sample.question.clone();
    for i in 0..sample.choices.len() {
        out.push('\n');
        out.push_str(&format_choice(sample, i)?);
    }
    Ok(out)
}

fn render_choice_block(name: TemplateName, sample: &VqaSample) -> Result<String, PromptError> {
    let mut values = BTreeMap::new();
    values.insert("question_and_choices", question_and_choices(sample)?);
    PromptTemplate::builtin(name).render(&values)
}

pub fn render_positive_prompt(sample: &VqaSample) -> Result<String, PromptError> {
    render_choice_block(TemplateName::Positive, sample)
}

/// Positive prompt without the caption section, used by the caption-free ablation.
pub fn render_caption_free_prompt(sample: &VqaSample) -> Result<String, PromptError> {
    render_choice_block(TemplateName::CaptionFree, sample)
}

/// Positive prompt plus a hint naming the gold answer.
pub fn render_star_rationalization_prompt(sample: &VqaSample) -> Result<String, PromptError> {
    let mut values = BTreeMap::new();
    values.insert("question_and_choices", question_and_choices(sample)?);
    values.insert("correct_choice", format_choice(sample, sample.answer_index)?);
    PromptTemplate::builtin(TemplateName::StarRationalization).render(&values)
}

fn negative_values(
    sample: &VqaSample,
    wrong_index: usize,
) -> Result<BTreeMap<&'static str, String>, PromptError> {
    let len = sample.choices.len();
    if wrong_index >= len {
        return Err(PromptError::IndexOutOfRange {
            index: wrong_index,
            len,
        });
    }
    if wrong_index == sample.answer_index {
        return Err(PromptError::DistractorIsGold(wrong_index));
    }
    let mut values = BTreeMap::new();
    values.insert("question", sample.question.clone());
    values.insert("incorrect_choice", format_choice(sample, wrong_index)?);
    Ok(values)
}

/// Negative rationalization prompt with the gold answer shown.
pub fn render_negative_generation_prompt(
    sample: &VqaSample,
    wrong_index: usize,
) -> Result<String, PromptError> {
    let mut values = negative_values(sample, wrong_index)?;
    values.insert("correct_choice", format_choice(sample, sample.answer_index)?);
    PromptTemplate::builtin(TemplateName::NegativeGeneration).render(&values)
}

/// Negative prompt as seen at training time: the gold-answer line is removed.
pub fn render_negative_training_prompt(
    sample: &VqaSample,
    wrong_index: usize,
) -> Result<String, PromptError> {
    let values = negative_values(sample, wrong_index)?;
    PromptTemplate::builtin(TemplateName::NegativeTraining).render(&values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Cot,
    DirectVqa,
    DirectSft,
}

pub fn render_baseline_prompt(kind: BaselineKind, sample: &VqaSample) -> Result<String, PromptError> {
    let name = match kind {
        BaselineKind::Cot => TemplateName::Cot,
        BaselineKind::DirectVqa => TemplateName::DirectVqa,
        BaselineKind::DirectSft => TemplateName::DirectSft,
    };
    render_choice_block(name, sample)
}
