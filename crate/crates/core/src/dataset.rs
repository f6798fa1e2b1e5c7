//! Multiple-choice VQA datasets: line-delimited loading, validation and
//! domain partitioning.
//!
//! One record per line:
//!
//! ```json
//! {"id":"q1","image":"img/q1.png","question":"…","choices":["a","b"],"answer_index":1,"domain":"commonsense"}
//! ```
//!
//! `answer_index` is 0-based and is the only stored form of the gold answer;
//! letter labels are derived when prompts are rendered.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::normalize_choice;

/// Knowledge domain of a sample.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Domain {
    Commonsense,
    NaturalScience,
    LanguageScience,
    SocialScience,
    Other(String),
}

impl Domain {
    pub fn as_str(&self) -> &str {
        match self {
            Domain::Commonsense => "commonsense",
            Domain::NaturalScience => "natural-science",
            Domain::LanguageScience => "language-science",
            Domain::SocialScience => "social-science",
            Domain::Other(name) => name,
        }
    }

    /// Column heading used in rendered reports.
    pub fn display_name(&self) -> &str {
        match self {
            Domain::Commonsense => "Commonsense",
            Domain::NaturalScience => "Natural-Science",
            Domain::LanguageScience => "Language-Science",
            Domain::SocialScience => "Social-Science",
            Domain::Other(name) => name,
        }
    }
}

impl From<String> for Domain {
    fn from(s: String) -> Self {
        match s.as_str() {
            "commonsense" => Domain::Commonsense,
            "natural-science" => Domain::NaturalScience,
            "language-science" => Domain::LanguageScience,
            "social-science" => Domain::SocialScience,
            _ => Domain::Other(s),
        }
    }
}

impl From<&str> for Domain {
    fn from(s: &str) -> Self {
        Domain::from(s.to_string())
    }
}

impl From<Domain> for String {
    fn from(d: Domain) -> Self {
        d.as_str().to_string()
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One `(image, question, choices, answer)` tuple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaSample {
    pub id: String,
    #[serde(rename = "image")]
    pub image_ref: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
    pub domain: Domain,
}

impl VqaSample {
    pub fn gold_choice(&self) -> Option<&str> {
        self.choices.get(self.answer_index).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    TooFewChoices { count: usize },
    /// More choices than there are letter labels.
    TooManyChoices { count: usize },
    AnswerIndexOutOfRange { index: usize, len: usize },
    EmptyChoice { index: usize },
    DuplicateChoice { first: usize, second: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "id is empty"),
            Violation::TooFewChoices { count } => {
                write!(f, "expected at least 2 choices, found {count}")
            }
            Violation::TooManyChoices { count } => {
                write!(f, "at most {MAX_CHOICES} choices can be labelled, found {count}")
            }
            Violation::AnswerIndexOutOfRange { index, len } => {
                write!(f, "answer_index {index} out of range for {len} choices")
            }
            Violation::EmptyChoice { index } => write!(f, "choice {index} is empty"),
            Violation::DuplicateChoice { first, second } => {
                write!(f, "choices {first} and {second} are identical after normalization")
            }
        }
    }
}

/// Choices are labelled (A) through (Z).
pub const MAX_CHOICES: usize = 26;

/// Checks every sample invariant and reports all violations found.
pub fn validate_sample(sample: &VqaSample) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if sample.id.trim().is_empty() {
        violations.push(Violation::EmptyId);
    }
    let len = sample.choices.len();
    if len < 2 {
        violations.push(Violation::TooFewChoices { count: len });
    }
    if len > MAX_CHOICES {
        violations.push(Violation::TooManyChoices { count: len });
    }
    if sample.answer_index >= len {
        violations.push(Violation::AnswerIndexOutOfRange {
            index: sample.answer_index,
            len,
        });
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, choice) in sample.choices.iter().enumerate() {
        let norm = normalize_choice(choice);
        if norm.is_empty() {
            violations.push(Violation::EmptyChoice { index: i });
            continue;
        }
        if let Some(&first) = seen.get(&norm) {
            violations.push(Violation::DuplicateChoice { first, second: i });
        } else {
            seen.insert(norm, i);
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// An ordered collection of samples; iteration order is file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: String,
    pub samples: Vec<VqaSample>,
}

impl DatasetSplit {
    pub fn new(name: impl Into<String>, samples: Vec<VqaSample>) -> Self {
        Self {
            name: name.into(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&VqaSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Id → sample lookup table for repeated access.
    pub fn index(&self) -> HashMap<&str, &VqaSample> {
        self.samples.iter().map(|s| (s.id.as_str(), s)).collect()
    }

    /// Image references that do not resolve to an existing file under `root`.
    pub fn missing_images(&self, root: &Path) -> Vec<(String, PathBuf)> {
        self.samples
            .iter()
            .filter_map(|s| {
                let p = root.join(&s.image_ref);
                (!p.is_file()).then(|| (s.id.clone(), p))
            })
            .collect()
    }
}

/// Supported dataset serializations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    Jsonl,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            other => Err(format!("unknown dataset format `{other}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: sample `{id}` is invalid: {}", join_violations(.violations))]
    Invalid {
        line: usize,
        id: String,
        violations: Vec<Violation>,
    },
    #[error("line {line}: duplicate id `{id}` (first seen on line {first_line})")]
    DuplicateId {
        line: usize,
        id: String,
        first_line: usize,
    },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Loads a split from `path`. The split is named after the file stem.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<DatasetSplit, DatasetError> {
    let DatasetFormat::Jsonl = format;
    let content = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_jsonl(&name, &content)
}

/// Parses line-delimited records. Blank lines are skipped but still counted.
pub fn parse_jsonl(name: &str, content: &str) -> Result<DatasetSplit, DatasetError> {
    let mut samples = Vec::new();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in content.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let sample: VqaSample =
            serde_json::from_str(raw).map_err(|source| DatasetError::Malformed { line, source })?;
        if let Err(violations) = validate_sample(&sample) {
            return Err(DatasetError::Invalid {
                line,
                id: sample.id,
                violations,
            });
        }
        if let Some(&first_line) = first_seen.get(&sample.id) {
            return Err(DatasetError::DuplicateId {
                line,
                id: sample.id,
                first_line,
            });
        }
        first_seen.insert(sample.id.clone(), line);
        samples.push(sample);
    }
    Ok(DatasetSplit::new(name, samples))
}

pub fn write_dataset(split: &DatasetSplit, path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in &split.samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Partitions a split by domain, keeping relative order within each part.
pub fn split_by_domain(split: &DatasetSplit) -> BTreeMap<Domain, DatasetSplit> {
    let mut out: BTreeMap<Domain, DatasetSplit> = BTreeMap::new();
    for s in &split.samples {
        out.entry(s.domain.clone())
            .or_insert_with(|| DatasetSplit::new(format!("{}/{}", split.name, s.domain), vec![]))
            .samples
            .push(s.clone());
    }
    out
}
