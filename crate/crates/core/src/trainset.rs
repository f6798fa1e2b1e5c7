//! Filtering generations into positive, negative and rationalized record sets
//! and assembling them into fine-tuning examples.
//!
//! The trainset file is line-delimited JSON, one [`FineTuneExample`] per line
//! with field order `example_id, image, prompt, target, tag, provenance`.
//! It is the input contract of the external trainer command.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::AddAssign;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetSplit, VqaSample};
use crate::prompts::{self, BaselineKind, PromptError};
use crate::rationale::{extract_answer, AnswerMatch, NegativeRationale, ParseError, PositiveRationale};

/// Which training recipe an iteration follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// Positive and negative rationales.
    Stl,
    /// Positive rationales only.
    StlNoNeg,
    /// Caption-free positive rationales only.
    StlNoCapNeg,
    /// Correct first-pass rationales plus gold-hinted rationalizations.
    Star,
    /// Direct answers, no rationales.
    DirectSft,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Stl => "STL",
            Variant::StlNoNeg => "STL_NO_NEG",
            Variant::StlNoCapNeg => "STL_NO_CAP_NEG",
            Variant::Star => "STAR",
            Variant::DirectSft => "DIRECT_SFT",
        }
    }

    pub fn allows(self, tag: ExampleTag) -> bool {
        use ExampleTag::*;
        match self {
            Variant::Stl => matches!(tag, Pos | Neg),
            Variant::StlNoNeg | Variant::StlNoCapNeg => tag == Pos,
            Variant::Star => matches!(tag, Pos | StarRationalized),
            Variant::DirectSft => tag == Direct,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "STL" => Ok(Variant::Stl),
            "STL_NO_NEG" => Ok(Variant::StlNoNeg),
            "STL_NO_CAP_NEG" => Ok(Variant::StlNoCapNeg),
            "STAR" => Ok(Variant::Star),
            "DIRECT_SFT" => Ok(Variant::DirectSft),
            _ => Err(format!("unknown variant `{s}`")),
        }
    }
}

/// Result of one generation after parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome<T> {
    Parsed { value: T },
    ParseFailed { error: ParseError },
    RequestFailed { reason: String },
}

impl<T> Outcome<T> {
    pub fn parsed(&self) -> Option<&T> {
        match self {
            Outcome::Parsed { value } => Some(value),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveGeneration {
    pub sample_id: String,
    pub raw_text: String,
    pub outcome: Outcome<PositiveRationale>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeResponse {
    pub sample_id: String,
    pub distractor_index: usize,
    pub outcome: Outcome<NegativeRationale>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationalizedResponse {
    pub sample_id: String,
    pub outcome: Outcome<PositiveRationale>,
}

/// Generations excluded from a set, by cause.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub request_failed: usize,
    pub parse_failed: usize,
    pub no_match: usize,
    pub ambiguous: usize,
}

impl FailureCounts {
    pub fn total(&self) -> usize {
        self.request_failed + self.parse_failed + self.no_match + self.ambiguous
    }
}

impl AddAssign for FailureCounts {
    fn add_assign(&mut self, o: Self) {
        self.request_failed += o.request_failed;
        self.parse_failed += o.parse_failed;
        self.no_match += o.no_match;
        self.ambiguous += o.ambiguous;
    }
}

/// An element of the positive rationale set for iteration `iteration`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveRecord {
    pub sample_id: String,
    pub caption: Option<String>,
    pub reasoning: String,
    pub gold_index: usize,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeRecord {
    pub sample_id: String,
    pub distractor_index: usize,
    pub caption: String,
    pub explanation: String,
    pub iteration: u32,
}

/// A first-pass generation whose answer did not match gold.
/// `wrong_prediction` is `None` when no choice could be extracted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncorrectRecord {
    pub sample_id: String,
    pub rationale: String,
    pub wrong_prediction: Option<usize>,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StarRationalizedRecord {
    pub sample_id: String,
    pub caption: Option<String>,
    pub reasoning: String,
    pub gold_index: usize,
    pub iteration: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleTag {
    Pos,
    Neg,
    StarRationalized,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_id: String,
    pub iteration: u32,
    pub variant: Variant,
}

/// One prompt/target pair handed to the trainer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneExample {
    pub example_id: String,
    pub image: String,
    pub prompt: String,
    pub target: String,
    pub tag: ExampleTag,
    pub provenance: Provenance,
}

#[derive(Debug, Error)]
pub enum TrainsetError {
    #[error("generation references unknown sample `{0}`")]
    UnknownSample(String),
    #[error("response for ({sample_id}, {distractor_index}) does not match an enumerated negative request")]
    UnexpectedNegative {
        sample_id: String,
        distractor_index: usize,
    },
    #[error("rationalized response for sample `{0}` whose first-pass answer was not wrong")]
    UnexpectedRationalization(String),
    #[error("variant {variant} does not accept these inputs: {reason}")]
    VariantMismatch { variant: Variant, reason: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn lookup<'a>(
    index: &HashMap<&str, &'a VqaSample>,
    id: &str,
) -> Result<&'a VqaSample, TrainsetError> {
    index
        .get(id)
        .copied()
        .ok_or_else(|| TrainsetError::UnknownSample(id.to_string()))
}

/// Correct first-pass generations plus everything needed downstream.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PositiveSet {
    pub records: Vec<PositiveRecord>,
    /// First-pass samples with no correct generation but at least one
    /// returned response.
    pub incorrect: Vec<IncorrectRecord>,
    pub failures: FailureCounts,
}

/// Keeps generations whose extracted answer equals gold, at most one per
/// sample (the first correct one in input order). Unextractable or unparsed
/// generations are counted as failures and treated as incorrect.
pub fn build_positive_set(
    generations: &[PositiveGeneration],
    split: &DatasetSplit,
    iteration: u32,
) -> Result<PositiveSet, TrainsetError> {
    let index = split.index();
    let mut out = PositiveSet::default();
    let mut correct: HashSet<&str> = HashSet::new();
    let mut incorrect: Vec<IncorrectRecord> = Vec::new();

    for g in generations {
        let sample = lookup(&index, &g.sample_id)?;
        match &g.outcome {
            Outcome::RequestFailed { .. } => out.failures.request_failed += 1,
            Outcome::ParseFailed { .. } => {
                out.failures.parse_failed += 1;
                incorrect.push(IncorrectRecord {
                    sample_id: g.sample_id.clone(),
                    rationale: g.raw_text.clone(),
                    wrong_prediction: None,
                    iteration,
                });
            }
            Outcome::Parsed { value } => {
                let prediction = value
                    .prediction
                    .unwrap_or_else(|| extract_answer(&value.conclusion_raw, &sample.choices));
                match prediction {
                    AnswerMatch::Index(i) if i == sample.answer_index => {
                        if correct.insert(sample.id.as_str()) {
                            out.records.push(PositiveRecord {
                                sample_id: sample.id.clone(),
                                caption: value.caption.clone(),
                                reasoning: value.reasoning.clone(),
                                gold_index: sample.answer_index,
                                iteration,
                            });
                        }
                    }
                    other => {
                        match other {
                            AnswerMatch::NoMatch => out.failures.no_match += 1,
                            AnswerMatch::Ambiguous => out.failures.ambiguous += 1,
                            AnswerMatch::Index(_) => {}
                        }
                        incorrect.push(IncorrectRecord {
                            sample_id: g.sample_id.clone(),
                            rationale: value.reasoning.clone(),
                            wrong_prediction: match other {
                                AnswerMatch::Index(i) => Some(i),
                                _ => None,
                            },
                            iteration,
                        });
                    }
                }
            }
        }
    }

    let mut seen = HashSet::new();
    out.incorrect = incorrect
        .into_iter()
        .filter(|r| !correct.contains(r.sample_id.as_str()) && seen.insert(r.sample_id.clone()))
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NegativeRequest {
    pub sample_id: String,
    pub distractor_index: usize,
}

/// One request per distractor of every positive sample, in choice order.
pub fn enumerate_negative_requests(
    positives: &[PositiveRecord],
    split: &DatasetSplit,
) -> Result<Vec<NegativeRequest>, TrainsetError> {
    let index = split.index();
    let mut out = Vec::new();
    for p in positives {
        let sample = lookup(&index, &p.sample_id)?;
        out.extend(
            (0..sample.choices.len())
                .filter(|&c| c != sample.answer_index)
                .map(|c| NegativeRequest {
                    sample_id: sample.id.clone(),
                    distractor_index: c,
                }),
        );
    }
    Ok(out)
}

/// Where negative records take their caption from.
#[derive(Debug, Clone, Copy)]
pub enum CaptionSource<'a> {
    /// The caption written in the negative response itself.
    Fresh,
    /// The caption of the sample's positive record, when it has one.
    ReusePositive(&'a [PositiveRecord]),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NegativeSet {
    pub records: Vec<NegativeRecord>,
    pub failures: FailureCounts,
}

pub fn build_negative_set(
    requests: &[NegativeRequest],
    responses: &[NegativeResponse],
    iteration: u32,
    captions: CaptionSource<'_>,
) -> Result<NegativeSet, TrainsetError> {
    let expected: HashSet<(&str, usize)> = requests
        .iter()
        .map(|r| (r.sample_id.as_str(), r.distractor_index))
        .collect();
    let reused: HashMap<&str, &str> = match captions {
        CaptionSource::Fresh => HashMap::new(),
        CaptionSource::ReusePositive(pos) => pos
            .iter()
            .filter_map(|p| Some((p.sample_id.as_str(), p.caption.as_deref()?)))
            .collect(),
    };
    let mut out = NegativeSet::default();
    for r in responses {
        if !expected.contains(&(r.sample_id.as_str(), r.distractor_index)) {
            return Err(TrainsetError::UnexpectedNegative {
                sample_id: r.sample_id.clone(),
                distractor_index: r.distractor_index,
            });
        }
        match &r.outcome {
            Outcome::RequestFailed { .. } => out.failures.request_failed += 1,
            Outcome::ParseFailed { .. } => out.failures.parse_failed += 1,
            Outcome::Parsed { value } => out.records.push(NegativeRecord {
                sample_id: r.sample_id.clone(),
                distractor_index: r.distractor_index,
                caption: reused
                    .get(r.sample_id.as_str())
                    .map_or_else(|| value.caption.clone(), |c| c.to_string()),
                explanation: value.explanation.clone(),
                iteration,
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StarSets {
    /// Correct first-pass rationales.
    pub positives: Vec<PositiveRecord>,
    /// Gold-hinted rationalizations whose re-extracted answer is gold.
    pub rationalized: Vec<StarRationalizedRecord>,
    pub incorrect: Vec<IncorrectRecord>,
    pub first_pass_failures: FailureCounts,
    pub rationalization_failures: FailureCounts,
}

pub fn build_star_sets(
    generations: &[PositiveGeneration],
    split: &DatasetSplit,
    rationalized: &[RationalizedResponse],
    iteration: u32,
) -> Result<StarSets, TrainsetError> {
    let first = build_positive_set(generations, split, iteration)?;
    let eligible: HashSet<&str> = first.incorrect.iter().map(|r| r.sample_id.as_str()).collect();
    let index = split.index();
    let mut kept = Vec::new();
    let mut kept_ids = HashSet::new();
    let mut failures = FailureCounts::default();
    for r in rationalized {
        let sample = lookup(&index, &r.sample_id)?;
        if !eligible.contains(r.sample_id.as_str()) {
            return Err(TrainsetError::UnexpectedRationalization(r.sample_id.clone()));
        }
        match &r.outcome {
            Outcome::RequestFailed { .. } => failures.request_failed += 1,
            Outcome::ParseFailed { .. } => failures.parse_failed += 1,
            Outcome::Parsed { value } => {
                match extract_answer(&value.conclusion_raw, &sample.choices) {
                    AnswerMatch::Index(i) if i == sample.answer_index => {
                        if kept_ids.insert(sample.id.clone()) {
                            kept.push(StarRationalizedRecord {
                                sample_id: sample.id.clone(),
                                caption: value.caption.clone(),
                                reasoning: value.reasoning.clone(),
                                gold_index: sample.answer_index,
                                iteration,
                            });
                        }
                    }
                    AnswerMatch::NoMatch => failures.no_match += 1,
                    AnswerMatch::Ambiguous => failures.ambiguous += 1,
                    AnswerMatch::Index(_) => {}
                }
            }
        }
    }
    Ok(StarSets {
        positives: first.records,
        rationalized: kept,
        incorrect: first.incorrect,
        first_pass_failures: first.failures,
        rationalization_failures: failures,
    })
}

/// Record sets feeding [`assemble_trainset`]. `None` means the set is not
/// part of the variant; `Some(&[])` means it is part of it but came out empty.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainsetInputs<'a> {
    pub positives: &'a [PositiveRecord],
    pub negatives: Option<&'a [NegativeRecord]>,
    pub star: Option<&'a [StarRationalizedRecord]>,
}

/// `"The correct choice is (L) text."`
pub fn conclusion_sentence(sample: &VqaSample) -> Result<String, PromptError> {
    Ok(format!(
        "The correct choice is {}.",
        prompts::format_choice(sample, sample.answer_index)?
    ))
}

pub fn positive_target(caption: &str, reasoning: &str, sample: &VqaSample) -> Result<String, PromptError> {
    Ok(format!(
        "###CAPTION: {caption}\n###REASONING: {reasoning}\n###CONCLUSION: {}",
        conclusion_sentence(sample)?
    ))
}

pub fn caption_free_target(reasoning: &str, sample: &VqaSample) -> Result<String, PromptError> {
    Ok(format!(
        "###REASONING: {reasoning}\n###CONCLUSION: {}",
        conclusion_sentence(sample)?
    ))
}

pub fn negative_target(caption: &str, explanation: &str) -> String {
    format!("###CAPTION: {caption}\n###EXPLANATION: {explanation}")
}

fn mismatch(variant: Variant, reason: &str) -> TrainsetError {
    TrainsetError::VariantMismatch {
        variant,
        reason: reason.to_string(),
    }
}

/// Builds the fine-tuning examples for one iteration.
pub fn assemble_trainset(
    inputs: TrainsetInputs<'_>,
    variant: Variant,
    split: &DatasetSplit,
    iteration: u32,
) -> Result<Vec<FineTuneExample>, TrainsetError> {
    match variant {
        Variant::Stl if inputs.negatives.is_none() => {
            return Err(mismatch(variant, "negative set required"))
        }
        Variant::Star if inputs.star.is_none() => {
            return Err(mismatch(variant, "rationalized set required"))
        }
        Variant::Stl | Variant::Star => {}
        Variant::StlNoNeg | Variant::StlNoCapNeg | Variant::DirectSft => {
            if inputs.negatives.is_some() {
                return Err(mismatch(variant, "negative set not allowed"));
            }
        }
    }
    if variant != Variant::Star && inputs.star.is_some() {
        return Err(mismatch(variant, "rationalized set not allowed"));
    }
    if variant == Variant::Star && inputs.negatives.is_some() {
        return Err(mismatch(variant, "negative set not allowed"));
    }
    if variant == Variant::DirectSft && !inputs.positives.is_empty() {
        return Err(mismatch(variant, "trains on gold answers, not rationales"));
    }

    let index = split.index();
    let provenance = |sample_id: &str| Provenance {
        sample_id: sample_id.to_string(),
        iteration,
        variant,
    };
    let mut out = Vec::new();

    if variant == Variant::DirectSft {
        for s in &split.samples {
            out.push(FineTuneExample {
                example_id: format!("it{iteration}-direct-{}", s.id),
                image: s.image_ref.clone(),
                prompt: prompts::render_baseline_prompt(BaselineKind::DirectSft, s)?,
                target: prompts::format_choice(s, s.answer_index)?,
                tag: ExampleTag::Direct,
                provenance: provenance(&s.id),
            });
        }
        return Ok(out);
    }

    for p in inputs.positives {
        let s = lookup(&index, &p.sample_id)?;
        let (prompt, target) = if variant == Variant::StlNoCapNeg {
            (
                prompts::render_caption_free_prompt(s)?,
                caption_free_target(&p.reasoning, s)?,
            )
        } else {
            let caption = p
                .caption
                .as_deref()
                .ok_or_else(|| mismatch(variant, "positive record without caption"))?;
            (
                prompts::render_positive_prompt(s)?,
                positive_target(caption, &p.reasoning, s)?,
            )
        };
        out.push(FineTuneExample {
            example_id: format!("it{iteration}-pos-{}", s.id),
            image: s.image_ref.clone(),
            prompt,
            target,
            tag: ExampleTag::Pos,
            provenance: provenance(&s.id),
        });
    }

    for n in inputs.negatives.unwrap_or_default() {
        let s = lookup(&index, &n.sample_id)?;
        out.push(FineTuneExample {
            example_id: format!("it{iteration}-neg-{}-{}", s.id, n.distractor_index),
            image: s.image_ref.clone(),
            prompt: prompts::render_negative_training_prompt(s, n.distractor_index)?,
            target: negative_target(&n.caption, &n.explanation),
            tag: ExampleTag::Neg,
            provenance: provenance(&s.id),
        });
    }

    for r in inputs.star.unwrap_or_default() {
        let s = lookup(&index, &r.sample_id)?;
        let caption = r
            .caption
            .as_deref()
            .ok_or_else(|| mismatch(variant, "rationalized record without caption"))?;
        out.push(FineTuneExample {
            example_id: format!("it{iteration}-star-{}", s.id),
            image: s.image_ref.clone(),
            prompt: prompts::render_positive_prompt(s)?,
            target: positive_target(caption, &r.reasoning, s)?,
            tag: ExampleTag::StarRationalized,
            provenance: provenance(&s.id),
        });
    }
    Ok(out)
}

/// Checks an example on its own: non-empty prompt/target and a tag the
/// variant can emit.
pub fn validate_example(ex: &FineTuneExample) -> Result<(), String> {
    if ex.prompt.trim().is_empty() {
        return Err(format!("{}: empty prompt", ex.example_id));
    }
    if ex.target.trim().is_empty() {
        return Err(format!("{}: empty target", ex.example_id));
    }
    if !ex.provenance.variant.allows(ex.tag) {
        return Err(format!(
            "{}: tag {:?} not allowed under {}",
            ex.example_id, ex.tag, ex.provenance.variant
        ));
    }
    Ok(())
}

pub fn write_trainset(examples: &[FineTuneExample], path: &Path) -> Result<(), TrainsetError> {
    let io = |source| TrainsetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_trainset(path: &Path) -> Result<Vec<FineTuneExample>, TrainsetError> {
    let content = fs::read_to_string(path).map_err(|source| TrainsetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| TrainsetError::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let ex: FineTuneExample =
            serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        validate_example(&ex).map_err(malformed)?;
        if !ids.insert(ex.example_id.clone()) {
            return Err(malformed(format!("duplicate example_id `{}`", ex.example_id)));
        }
        out.push(ex);
    }
    Ok(out)
}
