//! Blinded pairwise comparison of rationales from two runs.
//!
//! A task pool is built once from two evaluated runs and stored as an
//! immutable JSON file. Judgments go to an append-only JSONL log that is
//! replayed on startup. Which method sits on which side is kept server-side;
//! [`TaskPayload`] is the only shape annotators ever see.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetSplit, Domain};
use crate::evaluation::SampleOutcome;
use crate::prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

/// One method's rationale for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRationale {
    pub sample_id: String,
    pub rationale: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodRun {
    pub name: String,
    pub rationales: Vec<RunRationale>,
}

impl MethodRun {
    pub fn from_outcomes(name: impl Into<String>, outcomes: &[SampleOutcome]) -> Self {
        MethodRun {
            name: name.into(),
            rationales: outcomes
                .iter()
                .map(|o| RunRationale {
                    sample_id: o.sample_id.clone(),
                    rationale: o.raw_text.clone(),
                    correct: o.correct,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub per_domain_quota: usize,
    pub seed: u64,
    /// Restrict to samples both methods answered correctly.
    pub require_both_correct: bool,
}

/// A task with its hidden side mapping. Never sent to clients as is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub sample_id: String,
    pub domain: Domain,
    pub image_ref: String,
    pub question: String,
    pub left: String,
    pub right: String,
    pub left_method: String,
    pub right_method: String,
}

impl AnnotationTask {
    pub fn method_on(&self, side: Side) -> &str {
        match side {
            Side::Left => &self.left_method,
            Side::Right => &self.right_method,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPool {
    pub methods: [String; 2],
    pub config: PoolConfig,
    pub tasks: Vec<AnnotationTask>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub domain: Domain,
    pub eligible: usize,
    pub quota: usize,
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("both runs are named `{0}`")]
    SameMethod(String),
    #[error("run `{method}` has no rationale for sample `{sample_id}`")]
    MissingRationale { method: String, sample_id: String },
    #[error("not enough eligible samples: {}", describe_shortfall(.0))]
    Shortfall(Vec<Shortfall>),
}

fn describe_shortfall(s: &[Shortfall]) -> String {
    s.iter()
        .map(|s| format!("{} has {} of {}", s.domain, s.eligible, s.quota))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Samples `per_domain_quota` eligible samples per domain and assigns sides,
/// all from one generator seeded with `config.seed`. Candidates are sorted by
/// id first so the pool does not depend on input order.
pub fn build_task_pool(
    split: &DatasetSplit,
    run_a: &MethodRun,
    run_b: &MethodRun,
    config: PoolConfig,
) -> Result<TaskPool, PoolError> {
    if run_a.name == run_b.name {
        return Err(PoolError::SameMethod(run_a.name.clone()));
    }
    let index = |run: &MethodRun| -> HashMap<String, RunRationale> {
        run.rationales
            .iter()
            .map(|r| (r.sample_id.clone(), r.clone()))
            .collect()
    };
    let (a, b) = (index(run_a), index(run_b));

    let mut by_domain: BTreeMap<Domain, Vec<&str>> = BTreeMap::new();
    for s in &split.samples {
        let get = |map: &HashMap<String, RunRationale>, run: &MethodRun| {
            map.get(&s.id).cloned().ok_or_else(|| PoolError::MissingRationale {
                method: run.name.clone(),
                sample_id: s.id.clone(),
            })
        };
        let (ra, rb) = (get(&a, run_a)?, get(&b, run_b)?);
        let entry = by_domain.entry(s.domain.clone()).or_default();
        if !config.require_both_correct || (ra.correct && rb.correct) {
            entry.push(s.id.as_str());
        }
    }

    let shortfalls: Vec<Shortfall> = by_domain
        .iter()
        .filter(|(_, ids)| ids.len() < config.per_domain_quota)
        .map(|(d, ids)| Shortfall {
            domain: d.clone(),
            eligible: ids.len(),
            quota: config.per_domain_quota,
        })
        .collect();
    if !shortfalls.is_empty() {
        return Err(PoolError::Shortfall(shortfalls));
    }

    let samples = split.index();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tasks = Vec::new();
    for (_, mut ids) in by_domain {
        ids.sort_unstable();
        let mut picked = index::sample(&mut rng, ids.len(), config.per_domain_quota).into_vec();
        picked.sort_unstable();
        for i in picked {
            let s = samples[ids[i]];
            let a_left: bool = rng.gen_bool(0.5);
            let (left, right) = if a_left { (run_a, run_b) } else { (run_b, run_a) };
            let (lmap, rmap) = if a_left { (&a, &b) } else { (&b, &a) };
            tasks.push(AnnotationTask {
                task_id: format!("t{:05}", tasks.len() + 1),
                sample_id: s.id.clone(),
                domain: s.domain.clone(),
                image_ref: s.image_ref.clone(),
                question: prompts::question_and_choices(s)
                    .unwrap_or_else(|_| s.question.clone()),
                left: lmap[&s.id].rationale.clone(),
                right: rmap[&s.id].rationale.clone(),
                left_method: left.name.clone(),
                right_method: right.name.clone(),
            });
        }
    }
    Ok(TaskPool {
        methods: [run_a.name.clone(), run_b.name.clone()],
        config,
        tasks,
    })
}

pub fn write_pool(pool: &TaskPool, path: &Path) -> io::Result<()> {
    fs::write(path, serde_json::to_vec_pretty(pool)?)
}

pub fn read_pool(path: &Path) -> io::Result<TaskPool> {
    serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub judged: usize,
    pub total: usize,
}

/// What an annotator sees. Carries no method identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub task_id: String,
    pub question: String,
    pub image_url: String,
    pub left: String,
    pub right: String,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceJudgment {
    pub task_id: String,
    pub sample_id: String,
    pub domain: Domain,
    pub annotator_id: String,
    pub choice: Side,
    pub resolved_method: String,
    pub timestamp: DateTime<Utc>,
}

/// Acknowledgement returned to the annotator; the resolved method stays
/// server-side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentReceipt {
    pub task_id: String,
    pub annotator_id: String,
    pub choice: Side,
    pub timestamp: DateTime<Utc>,
}

impl From<&PreferenceJudgment> for JudgmentReceipt {
    fn from(j: &PreferenceJudgment) -> Self {
        JudgmentReceipt {
            task_id: j.task_id.clone(),
            annotator_id: j.annotator_id.clone(),
            choice: j.choice,
            timestamp: j.timestamp,
        }
    }
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unknown annotator `{0}`")]
    UnknownAnnotator(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("annotator `{annotator_id}` already judged task `{task_id}`")]
    Conflict { task_id: String, annotator_id: String },
    #[error("judgment log {path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

struct LogState {
    judgments: Vec<PreferenceJudgment>,
    judged: HashSet<(String, String)>,
    file: fs::File,
}

/// Task pool plus judgment log. Submissions are serialized through one lock
/// that covers both the duplicate check and the append.
pub struct AnnotationStore {
    pool: TaskPool,
    task_index: HashMap<String, usize>,
    annotators: BTreeSet<String>,
    log_path: PathBuf,
    state: Mutex<LogState>,
}

impl AnnotationStore {
    pub fn open(
        pool: TaskPool,
        annotators: impl IntoIterator<Item = String>,
        log_path: &Path,
    ) -> Result<Self, AnnotationError> {
        let log_err = |source| AnnotationError::Log {
            path: log_path.to_path_buf(),
            source,
        };
        let mut judgments = Vec::new();
        if log_path.exists() {
            let content = fs::read_to_string(log_path).map_err(log_err)?;
            for (i, line) in content.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let j: PreferenceJudgment = serde_json::from_str(line).map_err(|e| {
                    log_err(io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))
                })?;
                judgments.push(j);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(log_err)?;
        let judged = judgments
            .iter()
            .map(|j| (j.task_id.clone(), j.annotator_id.clone()))
            .collect();
        let task_index = pool
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.task_id.clone(), i))
            .collect();
        Ok(AnnotationStore {
            pool,
            task_index,
            annotators: annotators.into_iter().collect(),
            log_path: log_path.to_path_buf(),
            state: Mutex::new(LogState {
                judgments,
                judged,
                file,
            }),
        })
    }

    pub fn pool(&self) -> &TaskPool {
        &self.pool
    }

    pub fn task(&self, task_id: &str) -> Option<&AnnotationTask> {
        self.task_index.get(task_id).map(|&i| &self.pool.tasks[i])
    }

    fn check_annotator(&self, annotator_id: &str) -> Result<(), AnnotationError> {
        if self.annotators.contains(annotator_id) {
            Ok(())
        } else {
            Err(AnnotationError::UnknownAnnotator(annotator_id.to_string()))
        }
    }

    /// Lowest-ordinal task the annotator has not judged, or `None` when done.
    pub fn next_task(&self, annotator_id: &str) -> Result<Option<TaskPayload>, AnnotationError> {
        self.check_annotator(annotator_id)?;
        let state = self.state.lock().unwrap();
        let is_judged = |t: &AnnotationTask| {
            state
                .judged
                .contains(&(t.task_id.clone(), annotator_id.to_string()))
        };
        let judged = self.pool.tasks.iter().filter(|t| is_judged(t)).count();
        Ok(self.pool.tasks.iter().find(|t| !is_judged(t)).map(|t| TaskPayload {
            task_id: t.task_id.clone(),
            question: t.question.clone(),
            image_url: format!("/api/tasks/{}/image", t.task_id),
            left: t.left.clone(),
            right: t.right.clone(),
            progress: Progress {
                judged,
                total: self.pool.tasks.len(),
            },
        }))
    }

    pub fn submit(
        &self,
        task_id: &str,
        annotator_id: &str,
        choice: Side,
    ) -> Result<PreferenceJudgment, AnnotationError> {
        self.check_annotator(annotator_id)?;
        let task = self
            .task(task_id)
            .ok_or_else(|| AnnotationError::UnknownTask(task_id.to_string()))?;
        let mut state = self.state.lock().unwrap();
        let key = (task_id.to_string(), annotator_id.to_string());
        if state.judged.contains(&key) {
            return Err(AnnotationError::Conflict {
                task_id: key.0,
                annotator_id: key.1,
            });
        }
        let judgment = PreferenceJudgment {
            task_id: task_id.to_string(),
            sample_id: task.sample_id.clone(),
            domain: task.domain.clone(),
            annotator_id: annotator_id.to_string(),
            choice,
            resolved_method: task.method_on(choice).to_string(),
            timestamp: Utc::now(),
        };
        let mut line = serde_json::to_string(&judgment).expect("judgment serializes");
        line.push('\n');
        state
            .file
            .write_all(line.as_bytes())
            .and_then(|_| state.file.flush())
            .map_err(|source| AnnotationError::Log {
                path: self.log_path.clone(),
                source,
            })?;
        state.judged.insert(key);
        state.judgments.push(judgment.clone());
        Ok(judgment)
    }

    /// Every stored judgment in submission order.
    pub fn export(&self) -> Vec<PreferenceJudgment> {
        self.state.lock().unwrap().judgments.clone()
    }
}
