//! Parsing of sectioned model responses and answer extraction.
//!
//! A response is split at section markers (`###CAPTION:` and friends). Section
//! content runs from the end of its marker to the next marker or end of text
//! and is trimmed; interior newlines are kept.
//!
//! Strict mode accepts only the exact uppercase markers, each exactly once and
//! in contract order. Lenient mode first tries strict parsing and returns that
//! result when it succeeds; otherwise markers are matched case-insensitively,
//! the leading `###` becomes optional at line start, and sections are taken by
//! label regardless of order (the last non-empty occurrence of a label wins).

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{choice_label, normalize_answer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Caption,
    Reasoning,
    Conclusion,
    Explanation,
}

impl Section {
    pub fn label(self) -> &'static str {
        match self {
            Section::Caption => "CAPTION",
            Section::Reasoning => "REASONING",
            Section::Conclusion => "CONCLUSION",
            Section::Explanation => "EXPLANATION",
        }
    }

    pub fn marker(self) -> String {
        format!("###{}:", self.label())
    }

    fn from_label(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CAPTION" => Some(Section::Caption),
            "REASONING" => Some(Section::Reasoning),
            "CONCLUSION" => Some(Section::Conclusion),
            "EXPLANATION" => Some(Section::Explanation),
            _ => None,
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    Strict,
    #[default]
    Lenient,
}

impl std::str::FromStr for ParseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(ParseMode::Strict),
            "lenient" => Ok(ParseMode::Lenient),
            other => Err(format!("unknown parse mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "section", rename_all = "snake_case")]
pub enum ParseError {
    #[error("missing section {0}")]
    MissingSection(Section),
    #[error("section {0} is empty")]
    EmptySection(Section),
    #[error("section {0} appears more than once")]
    DuplicateSection(Section),
    #[error("sections out of order")]
    OutOfOrder,
}

/// Ordered list of sections a response must contain.
#[derive(Debug, Clone, Copy)]
pub struct Contract(&'static [Section]);

impl Contract {
    pub const POSITIVE: Contract =
        Contract(&[Section::Caption, Section::Reasoning, Section::Conclusion]);
    pub const CAPTION_FREE: Contract = Contract(&[Section::Reasoning, Section::Conclusion]);
    pub const NEGATIVE: Contract = Contract(&[Section::Caption, Section::Explanation]);

    pub fn sections(&self) -> &'static [Section] {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Marker {
    section: Section,
    start: usize,
    end: usize,
}

fn strict_markers(text: &str, contract: Contract) -> Vec<Marker> {
    let mut markers = Vec::new();
    for &section in contract.sections() {
        let m = section.marker();
        markers.extend(text.match_indices(&m).map(|(start, _)| Marker {
            section,
            start,
            end: start + m.len(),
        }));
    }
    markers.sort_by_key(|m| m.start);
    markers
}

fn lenient_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?im)(?:#+[ \t]*|^[ \t]*(?:\*\*)?)(caption|reasoning|conclusion|explanation)[ \t]*(?:\*\*)?[ \t]*:(?:\*\*)?",
        )
        .expect("valid marker regex")
    })
}

fn lenient_markers(text: &str, contract: Contract) -> Vec<Marker> {
    lenient_regex()
        .captures_iter(text)
        .filter_map(|caps| {
            let whole = caps.get(0)?;
            let section = Section::from_label(caps.get(1)?.as_str())?;
            contract.sections().contains(&section).then_some(Marker {
                section,
                start: whole.start(),
                end: whole.end(),
            })
        })
        .collect()
}

fn contents<'a>(text: &'a str, markers: &[Marker]) -> Vec<(Section, &'a str)> {
    markers
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let stop = markers.get(i + 1).map_or(text.len(), |n| n.start);
            (m.section, text[m.end..stop].trim())
        })
        .collect()
}

fn parse_strict(text: &str, contract: Contract) -> Result<Vec<String>, ParseError> {
    let markers = strict_markers(text, contract);
    for &s in contract.sections() {
        if !markers.iter().any(|m| m.section == s) {
            return Err(ParseError::MissingSection(s));
        }
    }
    for &s in contract.sections() {
        if markers.iter().filter(|m| m.section == s).count() > 1 {
            return Err(ParseError::DuplicateSection(s));
        }
    }
    if !markers
        .iter()
        .map(|m| m.section)
        .eq(contract.sections().iter().copied())
    {
        return Err(ParseError::OutOfOrder);
    }
    let found = contents(text, &markers);
    let mut out = Vec::with_capacity(found.len());
    for (section, body) in found {
        if body.is_empty() {
            return Err(ParseError::EmptySection(section));
        }
        out.push(body.to_string());
    }
    Ok(out)
}

fn parse_lenient(text: &str, contract: Contract) -> Result<Vec<String>, ParseError> {
    if let Ok(v) = parse_strict(text, contract) {
        return Ok(v);
    }
    let found = contents(text, &lenient_markers(text, contract));
    let mut out = Vec::with_capacity(contract.sections().len());
    for &s in contract.sections() {
        let mut occurrences = found.iter().filter(|(sec, _)| *sec == s).peekable();
        if occurrences.peek().is_none() {
            return Err(ParseError::MissingSection(s));
        }
        match occurrences.rfind(|(_, body)| !body.is_empty()) {
            Some((_, body)) => out.push(body.to_string()),
            None => return Err(ParseError::EmptySection(s)),
        }
    }
    Ok(out)
}

/// Splits `text` into the contract's sections, returned in contract order.
pub fn parse_sections(
    text: &str,
    contract: Contract,
    mode: ParseMode,
) -> Result<Vec<String>, ParseError> {
    match mode {
        ParseMode::Strict => parse_strict(text, contract),
        ParseMode::Lenient => parse_lenient(text, contract),
    }
}

/// Caption, reasoning and conclusion of a positive-prompt response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveRationale {
    /// `None` when the response came from the caption-free prompt.
    pub caption: Option<String>,
    pub reasoning: String,
    pub conclusion_raw: String,
    /// Filled by [`PositiveRationale::with_prediction`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<AnswerMatch>,
}

impl PositiveRationale {
    pub fn with_prediction(mut self, choices: &[String]) -> Self {
        self.prediction = Some(extract_answer(&self.conclusion_raw, choices));
        self
    }

    pub fn predicted_index(&self) -> Option<usize> {
        match self.prediction {
            Some(AnswerMatch::Index(i)) => Some(i),
            _ => None,
        }
    }

    /// Serializes back into the sectioned response shape.
    pub fn to_response(&self) -> String {
        let mut out = String::new();
        if let Some(c) = &self.caption {
            out.push_str(&format!("###CAPTION: {c}\n"));
        }
        out.push_str(&format!(
            "###REASONING: {}\n###CONCLUSION: {}",
            self.reasoning, self.conclusion_raw
        ));
        out
    }
}

/// Caption and explanation of a negative-prompt response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeRationale {
    pub caption: String,
    pub explanation: String,
}

impl NegativeRationale {
    pub fn to_response(&self) -> String {
        format!("###CAPTION: {}\n###EXPLANATION: {}", self.caption, self.explanation)
    }
}

pub fn parse_positive(text: &str, mode: ParseMode) -> Result<PositiveRationale, ParseError> {
    let mut parts = parse_sections(text, Contract::POSITIVE, mode)?.into_iter();
    let (caption, reasoning, conclusion_raw) = (parts.next(), parts.next(), parts.next());
    Ok(PositiveRationale {
        caption,
        reasoning: reasoning.unwrap_or_default(),
        conclusion_raw: conclusion_raw.unwrap_or_default(),
        prediction: None,
    })
}

/// Parses a response to the caption-free prompt (reasoning and conclusion only).
pub fn parse_caption_free(text: &str, mode: ParseMode) -> Result<PositiveRationale, ParseError> {
    let mut parts = parse_sections(text, Contract::CAPTION_FREE, mode)?.into_iter();
    Ok(PositiveRationale {
        caption: None,
        reasoning: parts.next().unwrap_or_default(),
        conclusion_raw: parts.next().unwrap_or_default(),
        prediction: None,
    })
}

pub fn parse_negative(text: &str, mode: ParseMode) -> Result<NegativeRationale, ParseError> {
    let mut parts = parse_sections(text, Contract::NEGATIVE, mode)?.into_iter();
    Ok(NegativeRationale {
        caption: parts.next().unwrap_or_default(),
        explanation: parts.next().unwrap_or_default(),
    })
}

/// Content of the conclusion section alone. Caption and reasoning markers
/// delimit it but are not required. The last conclusion marker wins.
pub fn extract_conclusion(text: &str, mode: ParseMode) -> Result<String, ParseError> {
    let markers = match mode {
        ParseMode::Strict => strict_markers(text, Contract::POSITIVE),
        ParseMode::Lenient => {
            let strict = strict_markers(text, Contract::POSITIVE);
            if strict.iter().any(|m| m.section == Section::Conclusion) {
                strict
            } else {
                lenient_markers(text, Contract::POSITIVE)
            }
        }
    };
    let found = contents(text, &markers);
    match found.iter().rev().find(|(s, _)| *s == Section::Conclusion) {
        None => Err(ParseError::MissingSection(Section::Conclusion)),
        Some((_, "")) => Err(ParseError::EmptySection(Section::Conclusion)),
        Some((_, body)) => Ok(body.to_string()),
    }
}

/// Result of mapping a conclusion onto a choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum AnswerMatch {
    Index(usize),
    NoMatch,
    Ambiguous,
}

/// Distinct choice indices named by letter tokens `(L)`, `L)` or `L.`,
/// or by the whole conclusion being a single letter.
fn letter_hits(conclusion: &str, n_choices: usize) -> BTreeSet<usize> {
    let label_index = |c: char| -> Option<usize> {
        let i = (c.to_ascii_uppercase() as u8).checked_sub(b'A')? as usize;
        (i < n_choices && choice_label(i).is_some()).then_some(i)
    };
    let mut hits = BTreeSet::new();
    let trimmed = normalize_answer(conclusion);
    let mut chars = trimmed.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if c.is_ascii_alphabetic() {
            if let Some(i) = label_index(c) {
                hits.insert(i);
            }
            return hits;
        }
    }

    let cs: Vec<char> = conclusion.chars().collect();
    let boundary = |i: usize| i == 0 || !cs[i - 1].is_alphanumeric();
    let mut i = 0;
    while i < cs.len() {
        if cs[i] == '('
            && i + 2 < cs.len()
            && cs[i + 1].is_ascii_alphabetic()
            && cs[i + 2] == ')'
            && boundary(i)
        {
            if let Some(idx) = label_index(cs[i + 1]) {
                hits.insert(idx);
            }
            i += 3;
            continue;
        }
        if cs[i].is_ascii_uppercase() && boundary(i) && i + 1 < cs.len() {
            let next = cs[i + 1];
            let dotted = next == '.' && cs.get(i + 2).is_none_or(|c| c.is_whitespace());
            if next == ')' || dotted {
                if let Some(idx) = label_index(cs[i]) {
                    hits.insert(idx);
                }
                i += 2;
                continue;
            }
        }
        i += 1;
    }
    hits
}

fn decide(hits: impl IntoIterator<Item = usize>) -> Option<AnswerMatch> {
    let hits: BTreeSet<usize> = hits.into_iter().collect();
    match hits.len() {
        0 => None,
        1 => hits.into_iter().next().map(AnswerMatch::Index),
        _ => Some(AnswerMatch::Ambiguous),
    }
}

/// Maps a conclusion onto a choice index.
///
/// Rungs, first firing rung wins: letter tokens; exact normalized text
/// equality; normalized choice text occurring inside the conclusion. Several
/// hits on the deciding rung give [`AnswerMatch::Ambiguous`].
pub fn extract_answer(conclusion_raw: &str, choices: &[String]) -> AnswerMatch {
    if let Some(m) = decide(letter_hits(conclusion_raw, choices.len())) {
        return m;
    }
    let conclusion = normalize_answer(conclusion_raw);
    let normalized: Vec<String> = choices.iter().map(|c| normalize_answer(c)).collect();
    let usable = || normalized.iter().enumerate().filter(|(_, c)| !c.is_empty());
    if let Some(m) = decide(usable().filter(|(_, c)| **c == conclusion).map(|(i, _)| i)) {
        return m;
    }
    if let Some(m) = decide(usable().filter(|(_, c)| conclusion.contains(c.as_str())).map(|(i, _)| i)) {
        return m;
    }
    AnswerMatch::NoMatch
}

#[cfg(test)]
mod tests {
    use super::*;

    fn choices(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn strict_well_formed() {
        let r = parse_positive("###CAPTION: a dog\n###REASONING: because\n###CONCLUSION: (A)", ParseMode::Strict)
            .unwrap();
        assert_eq!(r.caption.as_deref(), Some("a dog"));
        assert_eq!(r.reasoning, "because");
        assert_eq!(r.conclusion_raw, "(A)");
    }

    #[test]
    fn strict_missing_reasoning() {
        let e = parse_positive("###CAPTION: a dog\n###CONCLUSION: (A)", ParseMode::Strict).unwrap_err();
        assert_eq!(e, ParseError::MissingSection(Section::Reasoning));
    }

    #[test]
    fn strict_out_of_order_and_duplicate() {
        let e = parse_positive(
            "###REASONING: b\n###CAPTION: a\n###CONCLUSION: (A)",
            ParseMode::Strict,
        )
        .unwrap_err();
        assert_eq!(e, ParseError::OutOfOrder);
        let e = parse_positive(
            "###CAPTION: a\n###CAPTION: a2\n###REASONING: b\n###CONCLUSION: (A)",
            ParseMode::Strict,
        )
        .unwrap_err();
        assert_eq!(e, ParseError::DuplicateSection(Section::Caption));
    }

    #[test]
    fn lenient_tolerates_case_and_missing_hashes() {
        let r = parse_positive("caption: a dog\n###Reasoning: b\n###conclusion: (B)", ParseMode::Lenient)
            .unwrap();
        assert_eq!(r.caption.as_deref(), Some("a dog"));
        assert_eq!(r.reasoning, "b");
        assert_eq!(r.conclusion_raw, "(B)");
        assert!(parse_positive("caption: a dog\n###Reasoning: b\n###conclusion: (B)", ParseMode::Strict).is_err());
    }

    #[test]
    fn lenient_repairs_order_by_label() {
        let r = parse_positive("###REASONING: b\n###CAPTION: a\n###CONCLUSION: (A)", ParseMode::Lenient).unwrap();
        assert_eq!((r.caption.as_deref(), r.reasoning.as_str()), (Some("a"), "b"));
    }

    #[test]
    fn lenient_prefers_last_non_empty_occurrence() {
        let text = "###CAPTION: [Provide a description]\n###REASONING: [think]\n###CONCLUSION: [choice]\n\
                    ###CAPTION: real\n###REASONING: real reasoning\n###CONCLUSION: (C)\n###CONCLUSION:";
        let r = parse_positive(text, ParseMode::Lenient).unwrap();
        assert_eq!(r.caption.as_deref(), Some("real"));
        assert_eq!(r.conclusion_raw, "(C)");
    }

    #[test]
    fn lenient_ignores_label_words_mid_line() {
        let text = "###CAPTION: the caption: a dog\n###REASONING: r\n###CONCLUSION: (A)";
        let r = parse_positive(text, ParseMode::Lenient).unwrap();
        assert_eq!(r.caption.as_deref(), Some("the caption: a dog"));
    }

    #[test]
    fn interior_newlines_preserved() {
        let r = parse_positive(
            "Sure!\n###CAPTION: line one\nline two\n\n###REASONING: step 1\nstep 2\n###CONCLUSION: (A)\n",
            ParseMode::Strict,
        )
        .unwrap();
        assert_eq!(r.caption.as_deref(), Some("line one\nline two"));
        assert_eq!(r.reasoning, "step 1\nstep 2");
    }

    #[test]
    fn negative_cases() {
        assert_eq!(
            parse_negative("###CAPTION: x\n###EXPLANATION: y", ParseMode::Strict).unwrap(),
            NegativeRationale { caption: "x".into(), explanation: "y".into() }
        );
        assert_eq!(
            parse_negative("###CAPTION: only a caption", ParseMode::Lenient).unwrap_err(),
            ParseError::MissingSection(Section::Explanation)
        );
        for mode in [ParseMode::Strict, ParseMode::Lenient] {
            assert_eq!(
                parse_negative("###CAPTION:\n###EXPLANATION: y", mode).unwrap_err(),
                ParseError::EmptySection(Section::Caption)
            );
        }
    }

    #[test]
    fn caption_free_contract() {
        let r = parse_caption_free("###REASONING: r\n###CONCLUSION: (B)", ParseMode::Strict).unwrap();
        assert_eq!(r.caption, None);
        assert_eq!(r.to_response(), "###REASONING: r\n###CONCLUSION: (B)");
    }

    #[test]
    fn conclusion_only() {
        assert_eq!(
            extract_conclusion("Let's think... so\n###CONCLUSION: (B)", ParseMode::Strict).unwrap(),
            "(B)"
        );
        assert_eq!(
            extract_conclusion("blah\nConclusion: (C)", ParseMode::Lenient).unwrap(),
            "(C)"
        );
        assert_eq!(
            extract_conclusion("no marker here", ParseMode::Lenient).unwrap_err(),
            ParseError::MissingSection(Section::Conclusion)
        );
    }

    #[test]
    fn letter_rung() {
        let c = choices(&["a", "b", "c", "d"]);
        assert_eq!(extract_answer("(B)", &c), AnswerMatch::Index(1));
        assert_eq!(extract_answer("The correct choice is (D) d.", &c), AnswerMatch::Index(3));
        assert_eq!(extract_answer("C) c", &c), AnswerMatch::Index(2));
        assert_eq!(extract_answer("Answer: A.", &c), AnswerMatch::Index(0));
        assert_eq!(extract_answer("b", &c), AnswerMatch::Index(1));
        assert_eq!(extract_answer("Either (A) or (B)", &c), AnswerMatch::Ambiguous);
        assert_eq!(extract_answer("(B) ... so (B)", &c), AnswerMatch::Index(1));
        // (E) is not a valid label for four choices and is ignored.
        assert_eq!(extract_answer("(E)", &c), AnswerMatch::NoMatch);
    }

    #[test]
    fn text_rungs() {
        // Oracle by hand: normalized conclusion is
        // "the correct answer is buffet breakfast"; no letter tokens; no exact
        // match; among normalized choices only "buffet breakfast" is a substring.
        let c = choices(&["room service", "buffet breakfast", "picnic", "banquet"]);
        assert_eq!(
            extract_answer("The correct answer is buffet breakfast.", &c),
            AnswerMatch::Index(1)
        );
        assert_eq!(extract_answer("  Picnic! ", &c), AnswerMatch::Index(2));
        assert_eq!(extract_answer("picnic or banquet", &c), AnswerMatch::Ambiguous);
        assert_eq!(extract_answer("none of these", &c), AnswerMatch::NoMatch);
    }

    #[test]
    fn exact_match_beats_substring() {
        let c = choices(&["red", "red wine"]);
        assert_eq!(extract_answer("Red wine.", &c), AnswerMatch::Index(1));
        assert_eq!(extract_answer("it is red wine", &c), AnswerMatch::Ambiguous);
    }

    #[test]
    fn letters_inside_words_are_ignored() {
        let c = choices(&["yes", "no"]);
        assert_eq!(extract_answer("DNA.", &c), AnswerMatch::NoMatch);
        assert_eq!(extract_answer("PLAN B)", &c), AnswerMatch::Index(1));
    }
}
