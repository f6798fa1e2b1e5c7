//! Accuracy under each prompting mode, macro averaging, preference
//! aggregation and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::PreferenceJudgment;
use crate::dataset::{DatasetSplit, Domain, VqaSample};
use crate::gateway::{Gateway, GenerationRequest, GenerationStatus, ModelEndpoint};
use crate::prompts::{self, BaselineKind, PromptError};
use crate::rationale::{extract_answer, extract_conclusion, AnswerMatch, ParseMode};
use crate::trainset::FailureCounts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Answer-only prompt; letters are read from the whole response.
    Direct,
    Cot,
    /// The caption/reasoning/conclusion prompt.
    PositiveTemplate,
    /// Reasoning/conclusion prompt, for models trained without captions.
    CaptionFree,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Direct => "direct",
            EvalMode::Cot => "cot",
            EvalMode::PositiveTemplate => "positive_template",
            EvalMode::CaptionFree => "caption_free",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "direct" => Ok(EvalMode::Direct),
            "cot" => Ok(EvalMode::Cot),
            "positive_template" | "positive" => Ok(EvalMode::PositiveTemplate),
            "caption_free" => Ok(EvalMode::CaptionFree),
            _ => Err(format!("unknown eval mode `{s}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty split")]
    EmptySplit,
    #[error("macro average of an empty list")]
    EmptyAverage,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("annotators per sample must be odd, got {0}")]
    EvenAnnotatorCount(usize),
    #[error("sample `{sample_id}` has {got} judgments, expected {expected}")]
    JudgmentCount {
        sample_id: String,
        got: usize,
        expected: usize,
    },
    #[error("annotator `{annotator_id}` judged sample `{sample_id}` more than once")]
    DuplicateJudgment {
        sample_id: String,
        annotator_id: String,
    },
    #[error("judgment for sample `{sample_id}` names unknown method `{method}`")]
    UnknownMethod { sample_id: String, method: String },
}

pub fn prompt_for(mode: EvalMode, sample: &VqaSample) -> Result<String, PromptError> {
    match mode {
        EvalMode::Direct => prompts::render_baseline_prompt(BaselineKind::DirectVqa, sample),
        EvalMode::Cot => prompts::render_baseline_prompt(BaselineKind::Cot, sample),
        EvalMode::PositiveTemplate => prompts::render_positive_prompt(sample),
        EvalMode::CaptionFree => prompts::render_caption_free_prompt(sample),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFailure {
    RequestFailed,
    ParseFailed,
    NoMatch,
    Ambiguous,
}

/// Per-sample evaluation record, persisted next to the report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub domain: Domain,
    pub raw_text: String,
    pub predicted: Option<usize>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<ScoreFailure>,
}

/// Scores one response. Anything that does not yield a single choice index
/// counts as incorrect.
pub fn score_response(
    mode: EvalMode,
    raw_text: &str,
    sample: &VqaSample,
    parse_mode: ParseMode,
) -> SampleOutcome {
    let answer = match mode {
        EvalMode::Direct => Ok(extract_answer(raw_text, &sample.choices)),
        _ => extract_conclusion(raw_text, parse_mode).map(|c| extract_answer(&c, &sample.choices)),
    };
    let (predicted, failure) = match answer {
        Ok(AnswerMatch::Index(i)) => (Some(i), None),
        Ok(AnswerMatch::NoMatch) => (None, Some(ScoreFailure::NoMatch)),
        Ok(AnswerMatch::Ambiguous) => (None, Some(ScoreFailure::Ambiguous)),
        Err(_) => (None, Some(ScoreFailure::ParseFailed)),
    };
    SampleOutcome {
        sample_id: sample.id.clone(),
        domain: sample.domain.clone(),
        raw_text: raw_text.to_string(),
        predicted,
        correct: predicted == Some(sample.answer_index),
        failure,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCounts {
    pub total: usize,
    pub correct: usize,
    pub failures: FailureCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub domain: Domain,
    pub counts: DomainCounts,
    /// `correct / total * 100`, unrounded.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub mode: EvalMode,
    pub domains: Vec<DomainResult>,
    /// Mean of the per-domain accuracies, rounded to 2 decimals.
    pub macro_average: f64,
}

impl EvalReport {
    pub fn from_outcomes(model_id: &str, mode: EvalMode, outcomes: &[SampleOutcome]) -> Result<Self, EvalError> {
        let mut per: BTreeMap<Domain, DomainCounts> = BTreeMap::new();
        for o in outcomes {
            let c = per.entry(o.domain.clone()).or_default();
            c.total += 1;
            c.correct += o.correct as usize;
            match o.failure {
                Some(ScoreFailure::RequestFailed) => c.failures.request_failed += 1,
                Some(ScoreFailure::ParseFailed) => c.failures.parse_failed += 1,
                Some(ScoreFailure::NoMatch) => c.failures.no_match += 1,
                Some(ScoreFailure::Ambiguous) => c.failures.ambiguous += 1,
                None => {}
            }
        }
        let domains: Vec<DomainResult> = per
            .into_iter()
            .map(|(domain, counts)| DomainResult {
                accuracy: counts.correct as f64 / counts.total as f64 * 100.0,
                domain,
                counts,
            })
            .collect();
        let accs: Vec<f64> = domains.iter().map(|d| d.accuracy).collect();
        Ok(EvalReport {
            model_id: model_id.to_string(),
            mode,
            macro_average: macro_average(&accs)?,
            domains,
        })
    }

    pub fn accuracy(&self, domain: &Domain) -> Option<f64> {
        self.domains.iter().find(|d| &d.domain == domain).map(|d| d.accuracy)
    }

    pub fn total_failures(&self) -> usize {
        self.domains.iter().map(|d| d.counts.failures.total()).sum()
    }
}

pub struct EvalSettings {
    pub mode: EvalMode,
    pub parallelism: usize,
    pub parse_mode: ParseMode,
}

pub fn evaluate_split(
    gateway: &Gateway,
    model: &ModelEndpoint,
    split: &DatasetSplit,
    settings: &EvalSettings,
) -> Result<(EvalReport, Vec<SampleOutcome>), EvalError> {
    if split.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let requests = split
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(GenerationRequest {
                request_index: i,
                prompt: prompt_for(settings.mode, s)?,
                image_ref: s.image_ref.clone(),
                decoding: None,
            })
        })
        .collect::<Result<Vec<_>, PromptError>>()?;
    let results = gateway.generate_batch(model, &requests, settings.parallelism);
    let outcomes: Vec<SampleOutcome> = split
        .samples
        .iter()
        .zip(&results)
        .map(|(s, r)| match &r.status {
            GenerationStatus::Ok => score_response(settings.mode, &r.raw_text, s, settings.parse_mode),
            GenerationStatus::Failed(reason) => SampleOutcome {
                sample_id: s.id.clone(),
                domain: s.domain.clone(),
                raw_text: reason.to_string(),
                predicted: None,
                correct: false,
                failure: Some(ScoreFailure::RequestFailed),
            },
        })
        .collect();
    Ok((EvalReport::from_outcomes(&model.model_id, settings.mode, &outcomes)?, outcomes))
}

/// Rounds a percentage to 2 decimals, ties to even.
///
/// The scaled value is first snapped to a 1e-6 grid so that binary noise
/// (42.155 stored as 42.15499999...) does not decide the tie.
pub fn round2(x: f64) -> f64 {
    let scaled = ((x * 100.0) * 1e6).round() / 1e6;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let r = if (frac - 0.5).abs() < 1e-9 {
        if floor % 2.0 == 0.0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        scaled.round()
    };
    r / 100.0
}

/// Unweighted mean of per-domain accuracies, rounded with [`round2`].
pub fn macro_average(per_domain: &[f64]) -> Result<f64, EvalError> {
    if per_domain.is_empty() {
        return Err(EvalError::EmptyAverage);
    }
    Ok(round2(per_domain.iter().sum::<f64>() / per_domain.len() as f64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainPreference {
    pub prefer_a: usize,
    pub prefer_b: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSummary {
    pub method_a: String,
    pub method_b: String,
    pub annotators_per_sample: usize,
    pub domains: BTreeMap<Domain, DomainPreference>,
}

/// Majority vote per sample, then per-domain counts. Every judged sample must
/// carry exactly `annotators_per_sample` judgments from distinct annotators.
pub fn aggregate_preferences(
    judgments: &[PreferenceJudgment],
    annotators_per_sample: usize,
    method_a: &str,
    method_b: &str,
) -> Result<PreferenceSummary, EvalError> {
    if annotators_per_sample.is_multiple_of(2) {
        return Err(EvalError::EvenAnnotatorCount(annotators_per_sample));
    }
    let mut by_sample: BTreeMap<&str, Vec<&PreferenceJudgment>> = BTreeMap::new();
    for j in judgments {
        by_sample.entry(j.sample_id.as_str()).or_default().push(j);
    }
    let mut domains: BTreeMap<Domain, DomainPreference> = BTreeMap::new();
    for (sample_id, js) in by_sample {
        if js.len() != annotators_per_sample {
            return Err(EvalError::JudgmentCount {
                sample_id: sample_id.to_string(),
                got: js.len(),
                expected: annotators_per_sample,
            });
        }
        let mut annotators = BTreeSet::new();
        let mut votes_a = 0;
        for j in &js {
            if !annotators.insert(j.annotator_id.as_str()) {
                return Err(EvalError::DuplicateJudgment {
                    sample_id: sample_id.to_string(),
                    annotator_id: j.annotator_id.clone(),
                });
            }
            if j.resolved_method == method_a {
                votes_a += 1;
            } else if j.resolved_method != method_b {
                return Err(EvalError::UnknownMethod {
                    sample_id: sample_id.to_string(),
                    method: j.resolved_method.clone(),
                });
            }
        }
        let d = domains.entry(js[0].domain.clone()).or_default();
        d.total += 1;
        if votes_a * 2 > annotators_per_sample {
            d.prefer_a += 1;
        } else {
            d.prefer_b += 1;
        }
    }
    Ok(PreferenceSummary {
        method_a: method_a.to_string(),
        method_b: method_b.to_string(),
        annotators_per_sample,
        domains,
    })
}

/// One table row: per-domain accuracies and an optional average.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub cells: BTreeMap<Domain, f64>,
    pub average: Option<f64>,
}

impl ReportRow {
    pub fn from_report(method: impl Into<String>, r: &EvalReport) -> Self {
        ReportRow {
            method: method.into(),
            cells: r.domains.iter().map(|d| (d.domain.clone(), d.accuracy)).collect(),
            average: Some(r.macro_average),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Table,
    Delimited,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "delimited" | "csv" => Ok(ReportFormat::Delimited),
            _ => Err(format!("unknown report format `{s}`")),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", round2(v)))
}

fn csv_lines(records: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.write_record(&r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("utf-8 input")
}

fn table_lines(records: Vec<Vec<String>>) -> String {
    let cols = records.first().map_or(0, Vec::len);
    let widths: Vec<usize> = (0..cols)
        .map(|c| records.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(line.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-|-"));
            out.push('\n');
        }
    }
    out
}

/// Accuracy table (methods by domain, plus Average) followed by one block per
/// preference summary. Domains appear in their canonical order; cells are
/// printed with exactly 2 decimals, `-` where a method has no value.
pub fn render_report(rows: &[ReportRow], prefs: &[PreferenceSummary], format: ReportFormat) -> String {
    let domains: BTreeSet<&Domain> = rows.iter().flat_map(|r| r.cells.keys()).collect();
    let mut records = vec![std::iter::once("Method".to_string())
        .chain(domains.iter().map(|d| d.display_name().to_string()))
        .chain(std::iter::once("Average".to_string()))
        .collect::<Vec<_>>()];
    for r in rows {
        records.push(
            std::iter::once(r.method.clone())
                .chain(domains.iter().map(|d| cell(r.cells.get(*d).copied())))
                .chain(std::iter::once(cell(r.average)))
                .collect(),
        );
    }
    let render = |recs| match format {
        ReportFormat::Table => table_lines(recs),
        ReportFormat::Delimited => csv_lines(recs),
    };
    let mut out = render(records);
    for p in prefs {
        let mut recs = vec![vec![
            "Domain".to_string(),
            p.method_a.clone(),
            p.method_b.clone(),
            "Total".to_string(),
        ]];
        for (d, c) in &p.domains {
            recs.push(vec![
                d.display_name().to_string(),
                c.prefer_a.to_string(),
                c.prefer_b.to_string(),
                c.total.to_string(),
            ]);
        }
        out.push('\n');
        out.push_str(&render(recs));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, domain: &str) -> VqaSample {
        VqaSample {
            id: id.into(),
            image_ref: "i.png".into(),
            question: "Q?".into(),
            choices: vec!["red".into(), "green".into(), "blue".into()],
            answer_index: 1,
            domain: domain.into(),
        }
    }

    #[test]
    fn scoring_modes() {
        let s = sample("a", "commonsense");
        let o = score_response(EvalMode::Direct, "(B)", &s, ParseMode::Lenient);
        assert!(o.correct);
        let o = score_response(EvalMode::Direct, "I cannot tell.", &s, ParseMode::Lenient);
        assert_eq!(o.failure, Some(ScoreFailure::NoMatch));
        let o = score_response(
            EvalMode::PositiveTemplate,
            "###CAPTION: c\n###REASONING: r\n###CONCLUSION: green",
            &s,
            ParseMode::Strict,
        );
        assert!(o.correct);
        let o = score_response(EvalMode::PositiveTemplate, "green", &s, ParseMode::Strict);
        assert_eq!(o.failure, Some(ScoreFailure::ParseFailed));
        assert!(!o.correct);
    }

    #[test]
    fn accuracy_is_exact_ratio() {
        let outcomes: Vec<_> = (0..5)
            .map(|i| {
                let s = sample(&format!("s{i}"), "commonsense");
                let text = if i < 3 { "(B)" } else { "(A)" };
                score_response(EvalMode::Direct, text, &s, ParseMode::Lenient)
            })
            .collect();
        let r = EvalReport::from_outcomes("m", EvalMode::Direct, &outcomes).unwrap();
        assert_eq!(r.domains[0].accuracy, 60.0);
        assert_eq!(r.macro_average, 60.0);
    }

    #[test]
    fn rounding() {
        // Ties resolved to the even neighbour.
        assert_eq!(round2(37.665), 37.66);
        assert_eq!(round2(52.395), 52.40);
        assert_eq!(round2(0.125), 0.12);
        assert_eq!(round2(0.135), 0.14);
        assert_eq!(round2(42.155000001), 42.16);
        assert_eq!(round2(100.0), 100.0);
    }

    #[test]
    fn macro_average_of_equal_values() {
        for v in [0.0, 12.34, 33.33, 100.0] {
            assert_eq!(macro_average(&[v; 5]).unwrap(), v);
        }
        assert!(matches!(macro_average(&[]), Err(EvalError::EmptyAverage)));
    }

    #[test]
    fn empty_render_is_header_only() {
        assert_eq!(render_report(&[], &[], ReportFormat::Delimited), "Method,Average\n");
        let t = render_report(&[], &[], ReportFormat::Table);
        assert_eq!(t.lines().count(), 2);
        assert!(t.starts_with("Method | Average"));
    }

    #[test]
    fn render_layout() {
        let row = ReportRow {
            method: "Direct VQA".into(),
            cells: [
                (Domain::LanguageScience, 45.02),
                (Domain::Commonsense, 57.58),
                (Domain::SocialScience, 29.62),
                (Domain::NaturalScience, 36.4),
            ]
            .into_iter()
            .collect(),
            average: Some(42.16),
        };
        let partial = ReportRow {
            method: "Other".into(),
            cells: [(Domain::Commonsense, 62.64)].into_iter().collect(),
            average: None,
        };
        let csv = render_report(&[row, partial], &[], ReportFormat::Delimited);
        assert_eq!(
            csv,
            "Method,Commonsense,Natural-Science,Language-Science,Social-Science,Average\n\
             Direct VQA,57.58,36.40,45.02,29.62,42.16\n\
             Other,62.64,-,-,-,-\n"
        );
    }
}
