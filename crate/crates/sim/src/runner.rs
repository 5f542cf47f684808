//! Experiment orchestration.
//!
//! Per trial: corpus -> optional segmentation -> AWGN -> log-Mel features -> held-out speaker split ->
//! z-normalization with training statistics -> partition -> label errors on the
//! training shards -> federation. Trial `t` uses seed `master_seed + t` for
//! every random choice.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use fedaudio_core::audio::{self, AudioError};
use fedaudio_core::corruption::{self, CorruptionError, NoiseSpec, TransitionMatrix};
use fedaudio_core::features::{self, FeatureError, MelExtractor};
use fedaudio_core::fl::{self, Executor, FederationResult, FlError, RoundRecord};
use fedaudio_core::model::ParamVector;
use fedaudio_core::partition::{self, DirichletSpec, Example, FederatedDataset, PartitionError};
use fedaudio_core::rng::{self, SimRng};
use fedaudio_core::{AudioClip, FeatureMatrix, NormStats};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint;
use crate::config::{ConfigError, DatasetConfig, ExperimentConfig, PartitionConfig};
use crate::feature_file::{self, FeatureFileError};
use crate::manifest::{self, ManifestError};
use crate::report::{self, ReportError, RowContext, SummaryRow};
use crate::wav::{self, WavError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("audio: {0}")]
    Audio(#[from] AudioError),
    #[error("{path}: {source}")]
    Wav { path: PathBuf, source: WavError },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    FeatureFile { path: PathBuf, source: FeatureFileError },
    #[error("features: {0}")]
    Features(#[from] FeatureError),
    #[error("corruption: {0}")]
    Corruption(#[from] CorruptionError),
    #[error("partition: {0}")]
    Partition(#[from] PartitionError),
    #[error("federation: {0}")]
    Federation(#[from] FlError),
    #[error("report: {0}")]
    Report(#[from] ReportError),
    #[error("metrics: {0}")]
    Metric(#[from] fedaudio_core::metrics::MetricError),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One input example before feature extraction.
enum RawInput {
    Audio(AudioClip),
    Features(FeatureMatrix),
}

struct RawExample {
    input: RawInput,
    label: usize,
    key: String,
}

fn load_raw(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<RawExample>, usize), RunError> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { n_classes, .. } => {
            let spec = cfg.dataset.synth_spec(seed).expect("synthetic");
            let clips = audio::synth_corpus(&spec)?;
            let raw = clips
                .into_iter()
                .map(|c| RawExample { input: RawInput::Audio(c.clip), label: c.label, key: c.speaker_id })
                .collect();
            Ok((raw, *n_classes))
        }
        DatasetConfig::Manifest { path, n_classes } => {
            let entries = manifest::read_manifest(path)?;
            let max_label = entries.iter().map(|e| e.label).max().unwrap_or(0);
            let k = match n_classes {
                Some(k) if max_label >= *k => {
                    return Err(RunError::Data(format!("manifest label {max_label} is not below n_classes {k}")))
                }
                Some(k) => *k,
                None => max_label + 1,
            };
            cfg.check_label_errors(k)?;
            let clips = entries
                .par_iter()
                .map(|e| wav::load_wav(&e.path).map_err(|source| RunError::Wav { path: e.path.clone(), source }))
                .collect::<Result<Vec<_>, _>>()?;
            let raw = entries
                .into_iter()
                .zip(clips)
                .map(|(e, clip)| RawExample { input: RawInput::Audio(clip), label: e.label, key: e.client_key })
                .collect();
            Ok((raw, k))
        }
        DatasetConfig::Features { dir, n_classes } => {
            let mut paths: Vec<PathBuf> =
                fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
            paths.sort();
            if paths.is_empty() {
                return Err(RunError::Data(format!("no feature files in {}", dir.display())));
            }
            let raw = paths
                .par_iter()
                .map(|p| {
                    feature_file::load_feature_file(p, Some(*n_classes))
                        .map(|r| RawExample { input: RawInput::Features(r.features), label: r.label, key: r.client })
                        .map_err(|source| RunError::FeatureFile { path: p.clone(), source })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((raw, *n_classes))
        }
    }
}

fn segment_all(raw: Vec<RawExample>, seconds: f64, overlap: f64) -> Result<Vec<RawExample>, RunError> {
    let mut out = Vec::new();
    for ex in raw {
        let RawInput::Audio(clip) = &ex.input else {
            return Err(RunError::Data("segmentation needs raw audio".into()));
        };
        for piece in features::segment_clip(clip, seconds, overlap)? {
            out.push(RawExample { input: RawInput::Audio(piece), label: ex.label, key: ex.key.clone() });
        }
    }
    Ok(out)
}

/// Keys held out as the test set: a seeded shuffle of the sorted key set,
/// `round(fraction * n)` of them, at least one and never all.
pub fn held_out_keys(keys: &BTreeSet<&str>, fraction: f64, seed: u64) -> BTreeSet<String> {
    let mut all: Vec<&str> = keys.iter().copied().collect();
    let n_test = ((fraction * all.len() as f64).round() as usize).clamp(1, all.len().saturating_sub(1).max(1));
    let mut r: SimRng = rng::derived_stream(seed, &[rng::TAG_SPLIT]);
    all.shuffle(&mut r);
    all.into_iter().take(n_test).map(String::from).collect()
}

/// Everything a trial trains on, plus what was derived along the way.
pub struct PreparedTrial {
    pub dataset: FederatedDataset,
    pub norm: Option<NormStats>,
    pub transition: Option<TransitionMatrix>,
    pub test_keys: Vec<String>,
    pub input_dims: usize,
}

pub fn prepare_trial(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedTrial, RunError> {
    let (mut raw, n_classes) = load_raw(cfg, seed)?;
    if let Some(seg) = &cfg.segment {
        raw = segment_all(raw, seg.seconds, seg.overlap_seconds)?;
    }
    if raw.is_empty() {
        return Err(RunError::Data("dataset is empty".into()));
    }

    // Noise acts on the waveform, before features.
    let snr = cfg.corruption.snr_db;
    let extractor_for = |rate: u32| MelExtractor::new(&cfg.feature, rate);
    let feats: Vec<FeatureMatrix> = raw
        .par_iter()
        .enumerate()
        .map(|(i, ex)| -> Result<FeatureMatrix, RunError> {
            match &ex.input {
                RawInput::Features(m) => Ok(m.clone()),
                RawInput::Audio(clip) => {
                    let noisy;
                    let clip = match snr {
                        Some(snr_db) => {
                            let spec = NoiseSpec { snr_db, seed: rng::derive_seed(seed, &[rng::TAG_NOISE, i as u64]) };
                            noisy = corruption::inject_awgn(clip, &spec)?;
                            &noisy
                        }
                        None => clip,
                    };
                    Ok(extractor_for(clip.sample_rate())?.extract(clip)?)
                }
            }
        })
        .collect::<Result<_, _>>()?;
    let input_dims = feats[0].dims();
    if feats.iter().any(|f| f.dims() != input_dims) {
        return Err(RunError::Data("examples disagree on feature dims".into()));
    }

    let keys: BTreeSet<&str> = raw.iter().map(|e| e.key.as_str()).collect();
    if keys.len() < 2 {
        return Err(RunError::Data("need at least two client keys to hold some out for testing".into()));
    }
    let test_keys = held_out_keys(&keys, cfg.test_fraction, seed);
    let is_test: Vec<bool> = raw.iter().map(|e| test_keys.contains(&e.key)).collect();
    let (mut train_feats, mut test_feats) = (Vec::new(), Vec::new());
    for (f, &t) in feats.into_iter().zip(&is_test) {
        if t {
            test_feats.push(f)
        } else {
            train_feats.push(f)
        }
    }

    let norm = if cfg.normalize {
        let (tr, te, stats) = features::znormalize(&train_feats, &test_feats)?;
        train_feats = tr;
        test_feats = te;
        Some(stats)
    } else {
        None
    };

    let mut train: Vec<(FeatureMatrix, usize, String)> = Vec::new();
    let mut test_set = Vec::new();
    let (mut tr_iter, mut te_iter) = (train_feats.into_iter(), test_feats.into_iter());
    for (ex, &t) in raw.into_iter().zip(&is_test) {
        if t {
            test_set.push(Example { features: te_iter.next().expect("test feature"), label: ex.label });
        } else {
            train.push((tr_iter.next().expect("train feature"), ex.label, ex.key));
        }
    }

    let mut clients = match cfg.partition {
        PartitionConfig::ByKey => partition::partition_by_key(train)?,
        PartitionConfig::Dirichlet { alpha, n_clients, min_per_client } => {
            let spec =
                DirichletSpec { n_clients, alpha, min_per_client, seed: rng::derive_seed(seed, &[rng::TAG_PARTITION]) };
            let examples = train.into_iter().map(|(features, label, _)| Example { features, label }).collect();
            partition::dirichlet_partition(examples, n_classes, &spec)?
        }
    };

    let transition = match cfg.corruption.label_errors(rng::derive_seed(seed, &[rng::TAG_LABELS, 0])) {
        Some(spec) => {
            let q = corruption::gen_transition_matrix(n_classes, &spec)?;
            clients =
                corruption::apply_label_errors(&clients, n_classes, &q, rng::derive_seed(seed, &[rng::TAG_LABELS, 1]))?;
            Some(q)
        }
        None => None,
    };

    let dataset = FederatedDataset::new(clients, test_set, n_classes)?;
    Ok(PreparedTrial { dataset, norm, transition, test_keys: test_keys.into_iter().collect(), input_dims })
}

pub struct TrialOutput {
    pub trial: usize,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub final_params: ParamVector,
    pub norm: Option<NormStats>,
    pub transition: Option<TransitionMatrix>,
    pub test_keys: Vec<String>,
    pub n_clients: usize,
}

pub struct ExperimentOutput {
    pub trials: Vec<TrialOutput>,
    pub rows: Vec<SummaryRow>,
    pub config_hash: String,
}

impl ExperimentOutput {
    pub fn records(&self) -> Vec<Vec<RoundRecord>> {
        self.trials.iter().map(|t| t.records.clone()).collect()
    }
}

/// Appends one JSON line per round and flushes it.
struct JsonlSink {
    out: BufWriter<fs::File>,
    error: Option<io::Error>,
}

impl JsonlSink {
    fn create(path: &Path) -> io::Result<Self> {
        Ok(Self { out: BufWriter::new(fs::File::create(path)?), error: None })
    }

    fn push(&mut self, r: &RoundRecord) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(r).expect("record serializes");
        let res = writeln!(self.out, "{line}").and_then(|_| self.out.flush());
        if let Err(e) = res {
            self.error = Some(e);
        }
    }

    fn finish(self) -> io::Result<()> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

pub fn run_trial<E: Executor>(cfg: &ExperimentConfig, trial: usize, exec: &E) -> Result<TrialOutput, RunError> {
    let seed = cfg.trial_seed(trial);
    let prepared = prepare_trial(cfg, seed)?;
    let arch = cfg.arch.resolve(prepared.input_dims, prepared.dataset.n_classes);
    arch.validate().map_err(|e| ConfigError::new("arch", e.to_string()))?;
    let fed = fedaudio_core::FedConfig { master_seed: seed, ..cfg.fed.clone() };
    fs::create_dir_all(&cfg.output_dir)?;
    let mut sink = JsonlSink::create(&report::seed_log_path(&cfg.output_dir, trial))?;
    log::info!(
        "trial {trial} (seed {seed}): {} clients, {} test examples",
        prepared.dataset.clients.len(),
        prepared.dataset.test_set.len()
    );
    let result = fl::run_federation(&prepared.dataset, &arch, &fed, exec, |r| {
        log::debug!("round {} acc {:.4} loss {:.4}", r.round, r.test_accuracy, r.mean_train_loss);
        sink.push(r);
    });
    sink.finish()?;
    let FederationResult { records, state } = result?;
    checkpoint::write_checkpoint(cfg.output_dir.join(format!("checkpoint_seed_{trial:03}.txt")), &state.global_params)?;
    Ok(TrialOutput {
        trial,
        seed,
        records,
        final_params: state.global_params,
        norm: prepared.norm,
        transition: prepared.transition,
        test_keys: prepared.test_keys,
        n_clients: prepared.dataset.clients.len(),
    })
}

#[derive(Serialize)]
struct TrialMeta<'a> {
    trial: usize,
    seed: u64,
    n_clients: usize,
    test_keys: &'a [String],
    norm_stats: Option<&'a NormStats>,
    transition_matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct Metadata<'a> {
    config_hash: &'a str,
    config: &'a ExperimentConfig,
    f1_averaging: &'static str,
    std_convention: &'static str,
    trials: Vec<TrialMeta<'a>>,
}

pub fn row_context(cfg: &ExperimentConfig) -> RowContext {
    RowContext {
        experiment_id: cfg.experiment_id.clone(),
        optimizer: cfg.fed.optimizer.name().into(),
        sample_ratio: cfg.fed.sample_ratio,
        snr_db: cfg.corruption.snr_db,
        error_ratio: cfg.corruption.error_ratio,
        error_sparsity: cfg.corruption.error_ratio.map(|_| cfg.corruption.error_sparsity.unwrap_or(0.0)),
        alpha: match cfg.partition {
            PartitionConfig::Dirichlet { alpha, .. } => Some(alpha),
            PartitionConfig::ByKey => None,
        },
    }
}

/// Runs every trial, then writes `summary.csv` and `metadata.json` into the
/// output directory next to the per-seed logs and checkpoints.
pub fn run_experiment<E: Executor>(cfg: &ExperimentConfig, exec: &E) -> Result<ExperimentOutput, RunError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let config_hash = cfg.config_hash();
    let baseline = match &cfg.baseline_dir {
        Some(dir) => Some(report::read_log_dir(dir)?),
        None => None,
    };
    let trials = (0..cfg.n_seeds).map(|t| run_trial(cfg, t, exec)).collect::<Result<Vec<_>, _>>()?;
    let records: Vec<Vec<RoundRecord>> = trials.iter().map(|t| t.records.clone()).collect();
    let rows = report::summary_rows(
        &row_context(cfg),
        &records,
        &cfg.targets,
        cfg.target_metric.into(),
        baseline.as_deref(),
        &config_hash,
    )?;
    report::write_summary_csv(&cfg.output_dir.join("summary.csv"), &rows)?;
    let meta = Metadata {
        config_hash: &config_hash,
        config: cfg,
        f1_averaging: "macro",
        std_convention: "sample (n-1)",
        trials: trials
            .iter()
            .map(|t| TrialMeta {
                trial: t.trial,
                seed: t.seed,
                n_clients: t.n_clients,
                test_keys: &t.test_keys,
                norm_stats: t.norm.as_ref(),
                transition_matrix: t.transition.as_ref().map(|q| (0..q.k()).map(|i| q.row(i).to_vec()).collect()),
            })
            .collect(),
    };
    fs::write(cfg.output_dir.join("metadata.json"), serde_json::to_string_pretty(&meta).expect("metadata serializes"))?;
    Ok(ExperimentOutput { trials, rows, config_hash })
}
