//! The run manifest: `manifest.jsonl` in the output directory.
//!
//! Line 1 is the header (config, its digest, dataset hashes). Every later
//! line is either a completed iteration or a status change. Lines are only
//! ever appended; the file is rewritten through a temporary file and a rename
//! after each step so a crash leaves either the old or the new version.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::config::RunConfig;
use crate::dataset::Domain;
use crate::evaluation::{DomainCounts, EvalMode};
use crate::gateway::sha256_hex;
use crate::trainset::FailureCounts;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub config_path: PathBuf,
    pub config_digest: String,
    pub config: RunConfig,
    pub train_sha256: String,
    pub eval_sha256: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationCounts {
    pub generations: usize,
    pub positives: usize,
    pub negative_requests: usize,
    pub negatives: usize,
    pub rationalization_requests: usize,
    pub rationalized: usize,
    pub trainset: usize,
    pub positive_failures: FailureCounts,
    pub negative_failures: FailureCounts,
    pub rationalization_failures: FailureCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: EvalMode,
    pub per_domain: BTreeMap<Domain, f64>,
    pub counts: BTreeMap<Domain, DomainCounts>,
    pub macro_average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: u32,
    pub input_model_id: String,
    pub counts: IterationCounts,
    /// Relative to the output directory.
    pub trainset_path: String,
    /// Argv after placeholder substitution; empty when the trainer did not run.
    pub trainer_command: Vec<String>,
    pub produced_model_id: Option<String>,
    pub eval: Option<EvalSummary>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Plateau,
    MaxIterations,
    NoPositiveData,
    /// The variant trains once (direct answer fine-tuning).
    NonIterative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Converged { reason: StopReason },
    Failed { iteration: u32, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusRecord {
    #[serde(flatten)]
    pub status: RunStatus,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestEntry {
    Header(ManifestHeader),
    Iteration(IterationRecord),
    Status(StatusRecord),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Corrupted {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("config digest mismatch: manifest has {expected}, {path} now hashes to {actual}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("{0} changed since the run started")]
    DatasetChanged(String),
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    path: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl RunManifest {
    /// A new manifest holding only the header. Call [`RunManifest::save`].
    pub fn new(path: PathBuf, header: ManifestHeader) -> Self {
        RunManifest {
            path,
            entries: vec![ManifestEntry::Header(header)],
        }
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let corrupted = |line: usize, message: String| ManifestError::Corrupted {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let e: ManifestEntry = serde_json::from_str(line).map_err(|e| corrupted(i + 1, e.to_string()))?;
            match (&e, i) {
                (ManifestEntry::Header(_), 0) => {}
                (_, 0) => return Err(corrupted(1, "first line is not a header".into())),
                (ManifestEntry::Header(_), _) => return Err(corrupted(i + 1, "second header".into())),
                _ => {}
            }
            entries.push(e);
        }
        if entries.is_empty() {
            return Err(corrupted(1, "empty manifest".into()));
        }
        let m = RunManifest {
            path: path.to_path_buf(),
            entries,
        };
        for (k, r) in m.iterations().iter().enumerate() {
            if r.n as usize != k + 1 {
                return Err(corrupted(0, format!("iteration {} recorded where {} was expected", r.n, k + 1)));
            }
        }
        Ok(m)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn header(&self) -> &ManifestHeader {
        match &self.entries[0] {
            ManifestEntry::Header(h) => h,
            _ => unreachable!("first entry is always the header"),
        }
    }

    pub fn iterations(&self) -> Vec<&IterationRecord> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                ManifestEntry::Iteration(r) => Some(r),
                _ => None,
            })
            .collect()
    }

    /// The latest status line, unless an iteration was recorded after it.
    pub fn status(&self) -> RunStatus {
        match self.entries.last() {
            Some(ManifestEntry::Status(s)) => s.status.clone(),
            _ => RunStatus::Running,
        }
    }

    /// M_0 followed by every produced model.
    pub fn lineage(&self) -> Vec<String> {
        std::iter::once(self.header().config.endpoint.model_id.clone())
            .chain(self.iterations().iter().filter_map(|r| r.produced_model_id.clone()))
            .collect()
    }

    pub fn push_iteration(&mut self, record: IterationRecord) -> Result<(), ManifestError> {
        self.entries.push(ManifestEntry::Iteration(record));
        self.save()
    }

    pub fn push_status(&mut self, status: RunStatus) -> Result<(), ManifestError> {
        self.entries.push(ManifestEntry::Status(StatusRecord {
            status,
            at: Utc::now(),
        }));
        self.save()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("manifest entry serializes") + "\n")
            .collect()
    }

    /// Write to `<path>.tmp`, then rename over the manifest.
    pub fn save(&self) -> Result<(), ManifestError> {
        let io = |source| ManifestError::Io {
            path: self.path.clone(),
            source,
        };
        let tmp = self.path.with_extension("jsonl.tmp");
        fs::write(&tmp, self.to_jsonl()).map_err(io)?;
        fs::rename(&tmp, &self.path).map_err(io)
    }

    /// Digest of the manifest with timestamps and the config location
    /// removed. Two runs of the same config on the same inputs agree on it.
    pub fn comparison_digest(&self) -> String {
        let mut text = String::new();
        for e in &self.entries {
            let mut v = serde_json::to_value(e).expect("manifest entry serializes");
            strip_volatile(&mut v);
            text.push_str(&v.to_string());
            text.push('\n');
        }
        sha256_hex(text.as_bytes())
    }

    pub fn check_config(&self, current: &RunConfig, config_path: &Path) -> Result<(), ManifestError> {
        let actual = current.digest();
        let expected = &self.header().config_digest;
        if &actual != expected {
            return Err(ManifestError::DigestMismatch {
                path: config_path.to_path_buf(),
                expected: expected.clone(),
                actual,
            });
        }
        Ok(())
    }
}

const VOLATILE_KEYS: [&str; 5] = ["created_at", "started_at", "finished_at", "at", "config_path"];

fn strip_volatile(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for k in VOLATILE_KEYS {
                map.remove(k);
            }
            map.values_mut().for_each(strip_volatile);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}
