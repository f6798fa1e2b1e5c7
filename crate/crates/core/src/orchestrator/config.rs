//! Run configuration (TOML).
//!
//! Paths are stored exactly as written and resolved against the config
//! file's directory when used, so the same config in two directories has the
//! same digest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evaluation::EvalMode;
use crate::gateway::{sha256_hex, ModelEndpoint, RetryPolicy, DEFAULT_MAX_IMAGE_BYTES};
use crate::rationale::ParseMode;
use crate::trainset::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySettings {
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_initial_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_image_bytes")]
    pub max_image_bytes: usize,
}

fn default_max_retries() -> u32 {
    RetryPolicy::default().max_retries
}
fn default_initial_backoff_ms() -> u64 {
    RetryPolicy::default().initial_backoff_ms
}
fn default_max_backoff_ms() -> u64 {
    RetryPolicy::default().max_backoff_ms
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_max_image_bytes() -> usize {
    DEFAULT_MAX_IMAGE_BYTES
}

impl Default for GatewaySettings {
    fn default() -> Self {
        GatewaySettings {
            max_retries: default_max_retries(),
            initial_backoff_ms: default_initial_backoff_ms(),
            max_backoff_ms: default_max_backoff_ms(),
            timeout_secs: default_timeout_secs(),
            max_image_bytes: default_max_image_bytes(),
        }
    }
}

impl GatewaySettings {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            initial_backoff_ms: self.initial_backoff_ms,
            max_backoff_ms: self.max_backoff_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub train_split: PathBuf,
    pub eval_split: PathBuf,
    /// Directory image references are relative to. Defaults to the train
    /// split's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// The base model M_0.
    pub endpoint: ModelEndpoint,
    /// Command template with `{trainset}`, `{base_model}`, `{output_model}`.
    pub trainer_command: String,
    pub max_iterations: u32,
    /// Minimum macro-accuracy gain, in percentage points, to keep iterating.
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub parser_mode: ParseMode,
    #[serde(default)]
    pub seed: u64,
    /// Train each model from its predecessor instead of from M_0.
    #[serde(default)]
    pub incremental: bool,
    /// Train on the union of all trainsets so far.
    #[serde(default)]
    pub cumulative: bool,
    /// Negative records take the caption of the positive generation.
    #[serde(default)]
    pub reuse_positive_caption: bool,
    #[serde(default = "default_samples_per_item")]
    pub samples_per_item: u32,
    /// Overrides the mode derived from the variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_mode: Option<EvalMode>,
    #[serde(default)]
    pub gateway: GatewaySettings,
}

fn default_parallelism() -> usize {
    4
}
fn default_samples_per_item() -> u32 {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations < 1 {
            return Err("max_iterations must be at least 1".into());
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.parallelism < 1 {
            return Err("parallelism must be at least 1".into());
        }
        if self.samples_per_item < 1 {
            return Err("samples_per_item must be at least 1".into());
        }
        self.endpoint.validate()?;
        let argv = shell_words::split(&self.trainer_command)
            .map_err(|e| format!("trainer_command: {e}"))?;
        if argv.is_empty() {
            return Err("trainer_command is empty".into());
        }
        Ok(())
    }

    pub fn effective_eval_mode(&self) -> EvalMode {
        self.eval_mode.unwrap_or(match self.variant {
            Variant::StlNoCapNeg => EvalMode::CaptionFree,
            Variant::DirectSft => EvalMode::Direct,
            _ => EvalMode::PositiveTemplate,
        })
    }

    /// Seed sent with generation `k` of an item (0-based).
    pub fn generation_seed(&self, k: u32) -> u64 {
        self.endpoint.decoding.seed.unwrap_or(self.seed) + u64::from(k)
    }

    /// sha256 of the canonical (key-sorted) JSON form.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        sha256_hex(v.to_string().as_bytes())
    }
}

/// A config together with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub path: PathBuf,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        config.validate().map_err(|e| format!("{}: {e}", path.display()))?;
        let path = path
            .canonicalize()
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(LoadedConfig {
            config,
            path,
            base_dir,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn image_root(&self) -> PathBuf {
        match &self.config.image_root {
            Some(r) => self.resolve(r),
            None => self
                .resolve(&self.config.train_split)
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| self.base_dir.clone()),
        }
    }
}
