//! Shared fixtures: a synthetic dataset on disk, a scripted model that reads
//! the sample number back out of the prompt, and a shell one-liner trainer.
#![allow(dead_code)]

pub mod corpus;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use stl_core::dataset::{write_dataset, DatasetSplit, VqaSample};
use stl_core::gateway::{Backend, BackendCall, BackendError, ScriptedBackend};

pub const CHOICES: usize = 4;

/// Writes the model id `m-iter_<n>` (derived from the trainset path) to the
/// output file.
pub const TRAINER: &str =
    r#"sh -c 'printf "m-%s\n" "$(basename "$(dirname "$1")")" > "$2"' _ {trainset} {output_model}"#;

pub fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

/// `n` samples `{prefix}000..`, answer index `i % 4`, domains cycled.
pub fn samples(prefix: &str, n: usize, domains: &[&str]) -> Vec<VqaSample> {
    (0..n)
        .map(|i| VqaSample {
            id: format!("{prefix}{i:03}"),
            image_ref: format!("img/{prefix}{i:03}.png"),
            question: format!("What is shown in {prefix} scene {i:03}?"),
            choices: (0..CHOICES).map(|k| format!("object {i}-{k}")).collect(),
            answer_index: i % CHOICES,
            domain: domains[i % domains.len()].into(),
        })
        .collect()
}

pub fn write_split(root: &Path, file: &str, samples: Vec<VqaSample>) -> PathBuf {
    fs::create_dir_all(root.join("img")).unwrap();
    for s in &samples {
        fs::write(root.join(&s.image_ref), format!("png-bytes-{}", s.id)).unwrap();
    }
    let path = root.join(file);
    write_dataset(&DatasetSplit::new("x", samples), &path).unwrap();
    path
}

/// Reads `(prefix, number)` back from the `Question:` line.
pub fn locate(prompt: &str) -> Option<(String, usize)> {
    let line = prompt.lines().find(|l| l.starts_with("Question: What is shown in "))?;
    let rest = line.strip_prefix("Question: What is shown in ")?;
    let (prefix, tail) = rest.split_once(" scene ")?;
    Some((prefix.to_string(), tail.get(..3)?.parse().ok()?))
}

/// How the scripted model behaves.
#[derive(Clone, Default)]
pub struct Plan {
    /// Train samples answered correctly per model (index < value). Missing
    /// models use `default_train_correct`.
    pub train_correct: HashMap<String, usize>,
    pub default_train_correct: usize,
    /// Eval samples answered correctly per model.
    pub eval_correct: HashMap<String, usize>,
    /// Train sample numbers whose positive response lacks a REASONING section.
    pub malformed: BTreeSet<usize>,
    /// Rationalizations for these sample numbers still pick a wrong answer.
    pub stubborn: BTreeSet<usize>,
}

impl Plan {
    pub fn train(n: usize) -> Self {
        Plan {
            default_train_correct: n,
            ..Plan::default()
        }
    }

    pub fn eval(mut self, model: &str, correct: usize) -> Self {
        self.eval_correct.insert(model.into(), correct);
        self
    }
}

pub fn respond(plan: &Plan, call: &BackendCall<'_>) -> Result<String, BackendError> {
    let p = call.prompt;
    let (prefix, i) = locate(p).ok_or_else(|| BackendError::Fatal("unrecognized prompt".into()))?;
    let gold = i % CHOICES;
    let model = call.endpoint.model_id.as_str();
    let threshold = if prefix == "eval" {
        plan.eval_correct.get(model).copied().unwrap_or(0)
    } else {
        plan.train_correct
            .get(model)
            .copied()
            .unwrap_or(plan.default_train_correct)
    };
    let pick = if p.contains("Hint: the correct choice is") {
        if plan.stubborn.contains(&i) { (gold + 1) % CHOICES } else { gold }
    } else if i < threshold {
        gold
    } else {
        (gold + 1) % CHOICES
    };
    let l = letter(pick);
    let caption = format!("A photo of {prefix} scene {i:03}.");
    Ok(if p.contains("explain why the answer is wrong") {
        let wrong = p
            .lines()
            .find_map(|l| l.strip_prefix("Explain why this answer is wrong: "))
            .unwrap_or("?");
        format!("###CAPTION: {caption}\n###EXPLANATION: Nothing in the image matches {wrong}.")
    } else if p.contains("Answer with only the letter") {
        format!("({l})")
    } else if p.contains("###CAPTION:") {
        if prefix != "eval" && plan.malformed.contains(&i) && !p.contains("Hint:") {
            format!("###CAPTION: {caption}\n###CONCLUSION: ({l})")
        } else {
            format!("###CAPTION: {caption}\n###REASONING: Scene {i:03} shows one object clearly.\n###CONCLUSION: ({l})")
        }
    } else {
        format!("###REASONING: Scene {i:03} shows one object clearly.\n###CONCLUSION: ({l})")
    })
}

pub fn scripted(plan: Plan) -> Arc<dyn Backend> {
    Arc::new(ScriptedBackend::new(move |call| respond(&plan, call)))
}

pub struct RunDir {
    pub dir: tempfile::TempDir,
}

impl RunDir {
    /// Train split of `n_train` (`train` prefix), eval split of `n_eval`
    /// (`eval` prefix), both under `data/`.
    pub fn new(n_train: usize, n_eval: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        write_split(&data, "train.jsonl", samples("train", n_train, &["commonsense"]));
        write_split(
            &data,
            "eval.jsonl",
            samples("eval", n_eval, &["commonsense", "language-science"]),
        );
        RunDir { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Writes `<name>.toml` with the given variant and extra top-level keys.
    pub fn config(&self, name: &str, variant: &str, extra: &str) -> PathBuf {
        let text = format!(
            r#"variant = "{variant}"
train_split = "data/train.jsonl"
eval_split = "data/eval.jsonl"
output_dir = "out-{name}"
trainer_command = '''{TRAINER}'''
parallelism = 4
{extra}

[endpoint]
model_id = "m0"
base_url = "mock:scripted"

[gateway]
max_retries = 0
initial_backoff_ms = 0
max_backoff_ms = 0
"#
        );
        let path = self.path().join(format!("{name}.toml"));
        fs::write(&path, text).unwrap();
        path
    }
}

pub fn read_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
