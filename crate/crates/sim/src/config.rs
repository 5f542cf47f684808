//! Experiment configuration (TOML).
//!
//! ```toml
//! experiment_id = "clean"
//! output_dir = "runs/clean"
//! n_seeds = 3
//! targets = [0.8]
//!
//! [dataset]
//! kind = "synthetic"        # or "manifest" (path) / "features" (dir, n_classes)
//! n_classes = 4
//! n_speakers = 20
//! clips_per_speaker_per_class = 5
//! clip_seconds = 1.0
//! sample_rate = 16000
//!
//! [partition]
//! scheme = "by_key"         # or "dirichlet" (alpha, n_clients, min_per_client)
//!
//! [segment]                 # optional; 3 s windows overlapping by 1 s
//! seconds = 3.0
//! overlap_seconds = 1.0
//!
//! [corruption]              # optional; empty means a clean run
//! snr_db = 10.0
//! error_ratio = 0.3
//! error_sparsity = 0.4
//!
//! [arch]
//! kind = "mlp"              # or "conv_gru"
//!
//! [fed]
//! optimizer = "fedavg"
//! rounds = 100
//! sample_ratio = 0.5
//! client_lr = 0.1
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use fedaudio_core::corruption::LabelErrorSpec;
use fedaudio_core::fl::FedConfig;
use fedaudio_core::metrics::MetricKind;
use fedaudio_core::model::ModelArch;
use fedaudio_core::{FeatureConfig, SynthCorpusSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A schema or feasibility problem, located by its field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { path: path.into(), reason: reason.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "config error: {}", self.reason)
        } else {
            write!(f, "config error at `{}`: {}", self.path, self.reason)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        n_classes: usize,
        n_speakers: usize,
        clips_per_speaker_per_class: usize,
        clip_seconds: f64,
        sample_rate: u32,
        /// Fixed corpus seed; by default each trial generates its own corpus.
        #[serde(default)]
        seed: Option<u64>,
    },
    Manifest {
        path: PathBuf,
        #[serde(default)]
        n_classes: Option<usize>,
    },
    Features {
        dir: PathBuf,
        n_classes: usize,
    },
}

impl DatasetConfig {
    pub fn is_raw_audio(&self) -> bool {
        !matches!(self, DatasetConfig::Features { .. })
    }

    /// Class count when known without reading the data.
    pub fn declared_classes(&self) -> Option<usize> {
        match *self {
            DatasetConfig::Synthetic { n_classes, .. } | DatasetConfig::Features { n_classes, .. } => Some(n_classes),
            DatasetConfig::Manifest { n_classes, .. } => n_classes,
        }
    }

    pub fn synth_spec(&self, trial_seed: u64) -> Option<SynthCorpusSpec> {
        match *self {
            DatasetConfig::Synthetic {
                n_classes,
                n_speakers,
                clips_per_speaker_per_class,
                clip_seconds,
                sample_rate,
                seed,
            } => Some(SynthCorpusSpec {
                n_classes,
                n_speakers,
                clips_per_speaker_per_class,
                clip_seconds,
                sample_rate,
                seed: seed.unwrap_or(trial_seed),
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    #[default]
    ByKey,
    Dirichlet {
        alpha: f64,
        #[serde(default = "default_n_clients")]
        n_clients: usize,
        #[serde(default = "default_min_per_client")]
        min_per_client: usize,
    },
}

fn default_n_clients() -> usize {
    50
}

fn default_min_per_client() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub error_ratio: Option<f64>,
    #[serde(default)]
    pub error_sparsity: Option<f64>,
}

impl CorruptionConfig {
    pub fn label_errors(&self, seed: u64) -> Option<LabelErrorSpec> {
        self.error_ratio.map(|error_ratio| LabelErrorSpec {
            error_ratio,
            error_sparsity: self.error_sparsity.unwrap_or(0.0),
            seed,
        })
    }
}

/// Architecture without the data-derived sizes (input dims, class count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchConfig {
    Mlp {
        #[serde(default = "default_width")]
        hidden: usize,
    },
    ConvGru {
        #[serde(default = "default_channels")]
        conv_channels: (usize, usize),
        #[serde(default = "default_width")]
        gru_hidden: usize,
        #[serde(default = "default_width")]
        dense_hidden: usize,
    },
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::Mlp { hidden: default_width() }
    }
}

fn default_width() -> usize {
    64
}

fn default_channels() -> (usize, usize) {
    (16, 32)
}

impl ArchConfig {
    pub fn resolve(&self, input_dims: usize, n_classes: usize) -> ModelArch {
        match *self {
            ArchConfig::Mlp { hidden } => ModelArch::Mlp { input_dims, hidden, n_classes },
            ArchConfig::ConvGru { conv_channels, gru_hidden, dense_hidden } => {
                ModelArch::ConvGru { input_dims, conv_channels, gru_hidden, dense_hidden, n_classes }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetMetric {
    #[default]
    Accuracy,
    MacroF1,
}

impl From<TargetMetric> for MetricKind {
    fn from(m: TargetMetric) -> Self {
        match m {
            TargetMetric::Accuracy => MetricKind::Accuracy,
            TargetMetric::MacroF1 => MetricKind::F1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub output_dir: PathBuf,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub targets: Vec<f64>,
    #[serde(default)]
    pub target_metric: TargetMetric,
    /// Fraction of client keys (speakers) held out as the global test set.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Z-normalize features with training-set statistics.
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Directory of a previous run whose JSONL logs give baseline rounds.
    #[serde(default)]
    pub baseline_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub corruption: CorruptionConfig,
    /// Cut raw clips into overlapping segments before feature extraction.
    #[serde(default)]
    pub segment: Option<SegmentConfig>,
    #[serde(default)]
    pub feature: FeatureConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    pub fed: FedConfig,
}

/// Fixed-length segmentation. Segments keep the clip's label and client key and
/// are partitioned as independent examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub seconds: f64,
    #[serde(default)]
    pub overlap_seconds: f64,
}

fn default_n_seeds() -> usize {
    1
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { String::new() } else { path };
            ConfigError::new(path, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses, validates and resolves relative paths against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(b) = self.baseline_dir.as_mut() {
            fix(b);
        }
        match &mut self.dataset {
            DatasetConfig::Manifest { path, .. } => fix(path),
            DatasetConfig::Features { dir, .. } => fix(dir),
            DatasetConfig::Synthetic { .. } => {}
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.experiment_id.trim().is_empty() {
            return Err(ConfigError::new("experiment_id", "must not be empty"));
        }
        if self.n_seeds == 0 {
            return Err(ConfigError::new("n_seeds", "must be at least 1"));
        }
        if self.targets.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(ConfigError::new("targets", "every target must be in (0, 1]"));
        }
        if self.targets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::new("targets", "must be strictly increasing"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(ConfigError::new("test_fraction", "must be in (0, 1)"));
        }
        match &self.dataset {
            DatasetConfig::Synthetic { .. } => {
                let spec = self.dataset.synth_spec(0).expect("synthetic");
                spec.validate().map_err(|e| ConfigError::new("dataset", e.to_string()))?;
                if spec.n_speakers < 2 {
                    return Err(ConfigError::new(
                        "dataset.n_speakers",
                        "need at least 2 speakers for a held-out test split",
                    ));
                }
            }
            DatasetConfig::Features { n_classes, .. } | DatasetConfig::Manifest { n_classes: Some(n_classes), .. } => {
                if *n_classes < 2 {
                    return Err(ConfigError::new("dataset.n_classes", "must be at least 2"));
                }
            }
            DatasetConfig::Manifest { .. } => {}
        }
        if let PartitionConfig::Dirichlet { alpha, n_clients, .. } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(ConfigError::new("partition.alpha", "must be positive and finite"));
            }
            if n_clients == 0 {
                return Err(ConfigError::new("partition.n_clients", "must be at least 1"));
            }
        }
        if let Some(snr) = self.corruption.snr_db {
            if !snr.is_finite() {
                return Err(ConfigError::new("corruption.snr_db", "must be finite"));
            }
            if !self.dataset.is_raw_audio() {
                return Err(ConfigError::new(
                    "corruption.snr_db",
                    "noise needs raw audio; precomputed features cannot be corrupted",
                ));
            }
        }
        if let Some(seg) = &self.segment {
            if !(seg.seconds > 0.0 && seg.seconds.is_finite()) {
                return Err(ConfigError::new("segment.seconds", "must be positive and finite"));
            }
            if !(seg.overlap_seconds >= 0.0 && seg.overlap_seconds < seg.seconds) {
                return Err(ConfigError::new("segment.overlap_seconds", "must be in [0, seconds)"));
            }
            if !self.dataset.is_raw_audio() {
                return Err(ConfigError::new("segment", "segmentation needs raw audio"));
            }
        }
        if self.corruption.error_sparsity.is_some() && self.corruption.error_ratio.is_none() {
            return Err(ConfigError::new("corruption.error_ratio", "required when error_sparsity is set"));
        }
        if let Some(k) = self.dataset.declared_classes() {
            self.check_label_errors(k)?;
        }
        self.feature.validate().map_err(|e| ConfigError::new("feature", e.to_string()))?;
        self.fed.validate().map_err(|e| ConfigError::new("fed", e.to_string()))?;
        let input_dims = if self.dataset.is_raw_audio() { self.feature.n_mels } else { 10 };
        self.arch
            .resolve(input_dims, self.dataset.declared_classes().unwrap_or(2))
            .validate()
            .map_err(|e| ConfigError::new("arch", e.to_string()))?;
        Ok(())
    }

    /// Label-error feasibility for `k` classes.
    pub fn check_label_errors(&self, k: usize) -> Result<(), ConfigError> {
        if let Some(spec) = self.corruption.label_errors(0) {
            spec.validate(k).map_err(|e| ConfigError::new("corruption.error_sparsity", e.to_string()))?;
        }
        Ok(())
    }

    /// Seed of trial `t`.
    pub fn trial_seed(&self, t: usize) -> u64 {
        self.fed.master_seed.wrapping_add(t as u64)
    }

    /// SHA-256 (first 16 hex digits) of the resolved config as JSON, without
    /// `output_dir`, so reruns into another directory hash the same.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}
