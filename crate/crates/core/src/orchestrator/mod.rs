//! The outer self-training loop.
//!
//! Each iteration n uses M_{n-1} to answer the whole train split, keeps the
//! correct rationales, asks M_{n-1} to explain every distractor of those
//! samples, writes the variant's trainset, hands it to the trainer (from M_0
//! unless `incremental`) and evaluates the produced model. Artifacts land in
//! `output_dir/iter_n/`; the manifest records one line per finished
//! iteration.

pub mod config;
pub mod manifest;
pub mod trainer;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{load_dataset, DatasetError, DatasetFormat, DatasetSplit, VqaSample};
use crate::evaluation::{evaluate_split, EvalError, EvalReport, EvalSettings};
use crate::gateway::{
    sha256_hex, Backend, Decoding, FailureReason, Gateway, GenerationRequest, GenerationResult,
    GenerationStatus, ImageResolver, ModelEndpoint,
};
use crate::prompts::{self, PromptError};
use crate::rationale::{
    parse_caption_free, parse_negative, parse_positive, ParseError, ParseMode, PositiveRationale,
};
use crate::trainset::{
    assemble_trainset, build_negative_set, build_positive_set, build_star_sets,
    enumerate_negative_requests, read_trainset, write_trainset, CaptionSource, FineTuneExample,
    NegativeResponse, Outcome, PositiveGeneration, RationalizedResponse, TrainsetError,
    TrainsetInputs, Variant,
};

pub use config::{GatewaySettings, LoadedConfig, RunConfig};
pub use manifest::{
    EvalSummary, IterationCounts, IterationRecord, ManifestEntry, ManifestError, ManifestHeader,
    RunManifest, RunStatus, StopReason, MANIFEST_FILE,
};
pub use trainer::{invoke_trainer, render_command, TrainerError};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0} already holds a manifest; use resume")]
    ManifestExists(PathBuf),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Trainset(#[from] TrainsetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("iteration {iteration}: {source}")]
    Trainer {
        iteration: u32,
        #[source]
        source: TrainerError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("iteration {iteration}: {message}")]
    ReplayMiss { iteration: u32, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    Continue,
    Stop(StopReason),
}

/// Stop rules, first match wins: non-iterative variant, empty trainset,
/// plateau (gain over the previous iteration below epsilon), iteration cap.
pub fn check_convergence(records: &[&IterationRecord], config: &RunConfig) -> Convergence {
    let Some(last) = records.last() else {
        return Convergence::Continue;
    };
    if config.variant == Variant::DirectSft {
        return Convergence::Stop(StopReason::NonIterative);
    }
    if last.counts.trainset == 0 {
        return Convergence::Stop(StopReason::NoPositiveData);
    }
    if records.len() >= 2 {
        let prev = &records[records.len() - 2];
        if let (Some(a), Some(b)) = (&prev.eval, &last.eval) {
            if b.macro_average - a.macro_average < config.epsilon {
                return Convergence::Stop(StopReason::Plateau);
            }
        }
    }
    if last.n >= config.max_iterations {
        return Convergence::Stop(StopReason::MaxIterations);
    }
    Convergence::Continue
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Return after this iteration is recorded, as if the process were killed.
    pub halt_after: Option<u32>,
}

pub struct Runner {
    loaded: LoadedConfig,
    gateway: Gateway,
    train: DatasetSplit,
    eval: DatasetSplit,
    train_sha256: String,
    eval_sha256: String,
}

fn file_sha256(path: &Path) -> Result<String, OrchestratorError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), OrchestratorError> {
    let text: String = items
        .iter()
        .map(|i| serde_json::to_string(i).expect("artifact serializes") + "\n")
        .collect();
    fs::write(path, text).map_err(io_err(path))
}

/// Fails the iteration loudly if any request missed the replay transcript.
fn check_replay(results: &[GenerationResult], iteration: u32) -> Result<(), OrchestratorError> {
    for r in results {
        if let GenerationStatus::Failed(FailureReason::ReplayMiss(m)) = &r.status {
            return Err(OrchestratorError::ReplayMiss {
                iteration,
                message: m.clone(),
            });
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct GenerationArtifact<'a> {
    sample_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    distractor_index: Option<usize>,
    #[serde(flatten)]
    result: &'a GenerationResult,
}

impl Runner {
    pub fn new(loaded: LoadedConfig, backend: Arc<dyn Backend>) -> Result<Self, OrchestratorError> {
        let c = &loaded.config;
        let train_path = loaded.resolve(&c.train_split);
        let eval_path = loaded.resolve(&c.eval_split);
        let train = load_dataset(&train_path, DatasetFormat::Jsonl)?;
        let eval = load_dataset(&eval_path, DatasetFormat::Jsonl)?;
        let mut images = ImageResolver::new(loaded.image_root());
        images.max_encoded_bytes = c.gateway.max_image_bytes;
        let gateway = Gateway::new(backend, images, c.gateway.retry_policy());
        Ok(Runner {
            train_sha256: file_sha256(&train_path)?,
            eval_sha256: file_sha256(&eval_path)?,
            loaded,
            gateway,
            train,
            eval,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.loaded.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn output_dir(&self) -> PathBuf {
        self.loaded.output_dir()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.output_dir().join(MANIFEST_FILE)
    }

    /// Starts a fresh run. Refuses to overwrite an existing manifest.
    pub fn start(&self, opts: RunOptions) -> Result<RunManifest, OrchestratorError> {
        let out = self.output_dir();
        let path = self.manifest_path();
        if path.exists() {
            return Err(OrchestratorError::ManifestExists(out));
        }
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let mut manifest = RunManifest::new(
            path,
            ManifestHeader {
                format_version: 1,
                config_path: self.loaded.path.clone(),
                config_digest: self.config().digest(),
                config: self.config().clone(),
                train_sha256: self.train_sha256.clone(),
                eval_sha256: self.eval_sha256.clone(),
                created_at: Utc::now(),
            },
        );
        manifest.save()?;
        self.drive(&mut manifest, opts)?;
        Ok(manifest)
    }

    /// Continues a run from its first unfinished iteration. A converged run
    /// is returned unchanged.
    pub fn resume(&self, opts: RunOptions) -> Result<RunManifest, OrchestratorError> {
        let mut manifest = RunManifest::load(&self.manifest_path())?;
        manifest.check_config(self.config(), &self.loaded.path)?;
        let h = manifest.header();
        if h.train_sha256 != self.train_sha256 {
            return Err(ManifestError::DatasetChanged(self.config().train_split.display().to_string()).into());
        }
        if h.eval_sha256 != self.eval_sha256 {
            return Err(ManifestError::DatasetChanged(self.config().eval_split.display().to_string()).into());
        }
        if let RunStatus::Converged { .. } = manifest.status() {
            return Ok(manifest);
        }
        self.drive(&mut manifest, opts)?;
        Ok(manifest)
    }

    fn drive(&self, manifest: &mut RunManifest, opts: RunOptions) -> Result<(), OrchestratorError> {
        loop {
            if let Convergence::Stop(reason) = check_convergence(&manifest.iterations(), self.config()) {
                manifest.push_status(RunStatus::Converged { reason })?;
                log::info!("run converged: {reason:?}");
                return Ok(());
            }
            let n = manifest.iterations().len() as u32 + 1;
            let lineage = manifest.lineage();
            match self.run_iteration(n, &lineage) {
                Ok(record) => manifest.push_iteration(record)?,
                Err(e) => {
                    manifest.push_status(RunStatus::Failed {
                        iteration: n,
                        reason: e.to_string(),
                    })?;
                    return Err(e);
                }
            }
            if opts.halt_after == Some(n) {
                return Ok(());
            }
        }
    }

    fn iter_dir(&self, n: u32) -> Result<PathBuf, OrchestratorError> {
        let dir = self.output_dir().join(format!("iter_{n}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    fn requests_for<F>(&self, samples: &[&VqaSample], k: u32, render: F) -> Result<Vec<GenerationRequest>, PromptError>
    where
        F: Fn(&VqaSample) -> Result<String, PromptError>,
    {
        let mut out = Vec::new();
        for s in samples {
            let prompt = render(s)?;
            for j in 0..k {
                out.push(GenerationRequest {
                    request_index: out.len(),
                    prompt: prompt.clone(),
                    image_ref: s.image_ref.clone(),
                    decoding: Some(self.decoding(j)),
                });
            }
        }
        Ok(out)
    }

    fn decoding(&self, k: u32) -> Decoding {
        Decoding {
            seed: Some(self.config().generation_seed(k)),
            ..self.config().endpoint.decoding.clone()
        }
    }

    /// One pass of the algorithm body. Returns the finished record; nothing
    /// is written to the manifest here.
    pub fn run_iteration(&self, n: u32, lineage: &[String]) -> Result<IterationRecord, OrchestratorError> {
        let c = self.config();
        let started_at = Utc::now();
        let dir = self.iter_dir(n)?;
        let input_model = lineage.last().expect("lineage holds M_0").clone();
        let model = c.endpoint.with_model(&input_model);
        let mut counts = IterationCounts::default();
        log::info!("iteration {n}: generating with {input_model}");

        let examples = if c.variant == Variant::DirectSft {
            assemble_trainset(TrainsetInputs::default(), c.variant, &self.train, n)?
        } else {
            self.generate_examples(n, &model, &dir, &mut counts)?
        };

        let mut all = examples;
        if c.cumulative {
            let mut earlier = Vec::new();
            for m in 1..n {
                let p = self.output_dir().join(format!("iter_{m}/trainset.jsonl"));
                if p.exists() {
                    earlier.extend(read_trainset(&p)?);
                }
            }
            earlier.extend(all);
            all = earlier;
        }
        counts.trainset = all.len();
        let trainset_rel = format!("iter_{n}/trainset.jsonl");
        write_trainset(&all, &self.output_dir().join(&trainset_rel))?;

        let (trainer_command, produced, eval) = if all.is_empty() {
            (Vec::new(), None, None)
        } else {
            let base = if c.incremental { &input_model } else { &lineage[0] };
            let (argv, produced) = invoke_trainer(
                &c.trainer_command,
                &self.output_dir(),
                &trainset_rel,
                base,
                &format!("iter_{n}/trained_model.txt"),
            )
            .map_err(|source| OrchestratorError::Trainer { iteration: n, source })?;
            log::info!("iteration {n}: trained {produced}");
            let report = self.evaluate(n, &c.endpoint.with_model(&produced), &dir)?;
            (argv, Some(produced), Some(report))
        };

        Ok(IterationRecord {
            n,
            input_model_id: input_model,
            counts,
            trainset_path: trainset_rel,
            trainer_command,
            produced_model_id: produced,
            eval: eval.map(|r| EvalSummary {
                mode: r.mode,
                per_domain: r.domains.iter().map(|d| (d.domain.clone(), d.accuracy)).collect(),
                counts: r.domains.iter().map(|d| (d.domain.clone(), d.counts)).collect(),
                macro_average: r.macro_average,
            }),
            started_at,
            finished_at: Utc::now(),
        })
    }

    fn evaluate(&self, n: u32, model: &ModelEndpoint, dir: &Path) -> Result<EvalReport, OrchestratorError> {
        let settings = EvalSettings {
            mode: self.config().effective_eval_mode(),
            parallelism: self.config().parallelism,
            parse_mode: self.config().parser_mode,
        };
        let (report, outcomes) = evaluate_split(&self.gateway, model, &self.eval, &settings)?;
        if let Some(miss) = outcomes.iter().find(|o| o.raw_text.starts_with("replay miss")) {
            return Err(OrchestratorError::ReplayMiss {
                iteration: n,
                message: miss.raw_text.clone(),
            });
        }
        write_jsonl(&dir.join("eval_samples.jsonl"), &outcomes)?;
        let p = dir.join("eval_report.json");
        fs::write(&p, serde_json::to_string_pretty(&report).expect("report serializes")).map_err(io_err(&p))?;
        Ok(report)
    }

    fn generate_examples(
        &self,
        n: u32,
        model: &ModelEndpoint,
        dir: &Path,
        counts: &mut IterationCounts,
    ) -> Result<Vec<FineTuneExample>, OrchestratorError> {
        let c = self.config();
        let mode = c.parser_mode;
        let k = c.samples_per_item;
        let samples: Vec<&VqaSample> = self.train.samples.iter().collect();
        let caption_free = c.variant == Variant::StlNoCapNeg;

        let render = if caption_free {
            prompts::render_caption_free_prompt
        } else {
            prompts::render_positive_prompt
        };
        let requests = self.requests_for(&samples, k, render)?;
        let results = self.gateway.generate_batch(model, &requests, c.parallelism);
        check_replay(&results, n)?;
        let sample_of = |i: usize| samples[i / k as usize];
        write_jsonl(
            &dir.join("positive_generations.jsonl"),
            &results
                .iter()
                .map(|r| GenerationArtifact {
                    sample_id: &sample_of(r.request_index).id,
                    distractor_index: None,
                    result: r,
                })
                .collect::<Vec<_>>(),
        )?;
        let generations: Vec<PositiveGeneration> = results
            .iter()
            .map(|r| {
                let s = sample_of(r.request_index);
                PositiveGeneration {
                    sample_id: s.id.clone(),
                    raw_text: r.raw_text.clone(),
                    outcome: positive_outcome(r, s, mode, caption_free),
                }
            })
            .collect();
        counts.generations = generations.len();

        if c.variant == Variant::Star {
            return self.star_examples(n, model, dir, &generations, counts);
        }

        let pos = build_positive_set(&generations, &self.train, n)?;
        counts.positives = pos.records.len();
        counts.positive_failures = pos.failures;
        write_jsonl(&dir.join("positives.jsonl"), &pos.records)?;

        let negatives = if c.variant == Variant::Stl {
            let neg_requests = enumerate_negative_requests(&pos.records, &self.train)?;
            counts.negative_requests = neg_requests.len();
            let index = self.train.index();
            let gen_requests = neg_requests
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let s = index[r.sample_id.as_str()];
                    Ok(GenerationRequest {
                        request_index: i,
                        prompt: prompts::render_negative_generation_prompt(s, r.distractor_index)?,
                        image_ref: s.image_ref.clone(),
                        decoding: Some(self.decoding(0)),
                    })
                })
                .collect::<Result<Vec<_>, PromptError>>()?;
            let results = self.gateway.generate_batch(model, &gen_requests, c.parallelism);
            check_replay(&results, n)?;
            write_jsonl(
                &dir.join("negative_generations.jsonl"),
                &results
                    .iter()
                    .zip(&neg_requests)
                    .map(|(r, q)| GenerationArtifact {
                        sample_id: &q.sample_id,
                        distractor_index: Some(q.distractor_index),
                        result: r,
                    })
                    .collect::<Vec<_>>(),
            )?;
            let responses: Vec<NegativeResponse> = results
                .iter()
                .zip(&neg_requests)
                .map(|(r, q)| NegativeResponse {
                    sample_id: q.sample_id.clone(),
                    distractor_index: q.distractor_index,
                    outcome: outcome_of(r, |t| parse_negative(t, mode)),
                })
                .collect();
            let captions = if c.reuse_positive_caption {
                CaptionSource::ReusePositive(&pos.records)
            } else {
                CaptionSource::Fresh
            };
            let neg = build_negative_set(&neg_requests, &responses, n, captions)?;
            counts.negatives = neg.records.len();
            counts.negative_failures = neg.failures;
            write_jsonl(&dir.join("negatives.jsonl"), &neg.records)?;
            Some(neg.records)
        } else {
            None
        };

        Ok(assemble_trainset(
            TrainsetInputs {
                positives: &pos.records,
                negatives: negatives.as_deref(),
                star: None,
            },
            c.variant,
            &self.train,
            n,
        )?)
    }

    fn star_examples(
        &self,
        n: u32,
        model: &ModelEndpoint,
        dir: &Path,
        generations: &[PositiveGeneration],
        counts: &mut IterationCounts,
    ) -> Result<Vec<FineTuneExample>, OrchestratorError> {
        let c = self.config();
        let first = build_positive_set(generations, &self.train, n)?;
        let index = self.train.index();
        let wrong: Vec<&VqaSample> = first
            .incorrect
            .iter()
            .map(|r| index[r.sample_id.as_str()])
            .collect();
        counts.rationalization_requests = wrong.len();
        let requests = self.requests_for(&wrong, 1, prompts::render_star_rationalization_prompt)?;
        let results = self.gateway.generate_batch(model, &requests, c.parallelism);
        check_replay(&results, n)?;
        write_jsonl(
            &dir.join("rationalizations.jsonl"),
            &results
                .iter()
                .map(|r| GenerationArtifact {
                    sample_id: &wrong[r.request_index].id,
                    distractor_index: None,
                    result: r,
                })
                .collect::<Vec<_>>(),
        )?;
        let rationalized: Vec<RationalizedResponse> = results
            .iter()
            .map(|r| RationalizedResponse {
                sample_id: wrong[r.request_index].id.clone(),
                outcome: outcome_of(r, |t| parse_positive(t, c.parser_mode)),
            })
            .collect();
        let sets = build_star_sets(generations, &self.train, &rationalized, n)?;
        counts.positives = sets.positives.len();
        counts.rationalized = sets.rationalized.len();
        counts.positive_failures = sets.first_pass_failures;
        counts.rationalization_failures = sets.rationalization_failures;
        write_jsonl(&dir.join("positives.jsonl"), &sets.positives)?;
        write_jsonl(&dir.join("star_rationalized.jsonl"), &sets.rationalized)?;
        Ok(assemble_trainset(
            TrainsetInputs {
                positives: &sets.positives,
                negatives: None,
                star: Some(&sets.rationalized),
            },
            c.variant,
            &self.train,
            n,
        )?)
    }
}

fn outcome_of<T>(
    r: &GenerationResult,
    parse: impl FnOnce(&str) -> Result<T, ParseError>,
) -> Outcome<T> {
    match &r.status {
        GenerationStatus::Failed(reason) => Outcome::RequestFailed {
            reason: reason.to_string(),
        },
        GenerationStatus::Ok => match parse(&r.raw_text) {
            Ok(value) => Outcome::Parsed { value },
            Err(error) => Outcome::ParseFailed { error },
        },
    }
}

fn positive_outcome(
    r: &GenerationResult,
    s: &VqaSample,
    mode: ParseMode,
    caption_free: bool,
) -> Outcome<PositiveRationale> {
    outcome_of(r, |t| {
        let parsed = if caption_free {
            parse_caption_free(t, mode)
        } else {
            parse_positive(t, mode)
        };
        parsed.map(|p| p.with_prediction(&s.choices))
    })
}
