use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedaudio_core::audio::{self, SynthCorpusSpec};
use fedaudio_core::corruption::{self, LabelErrorSpec, NoiseSpec, TransitionMatrix};
use fedaudio_core::features::{FeatureConfig, MelExtractor};
use fedaudio_core::metrics::MetricKind;
use fedaudio_core::partition::{self, DirichletSpec};
use fedaudio_core::rng;
use fedaudio_sim::config::ConfigError;
use fedaudio_sim::manifest::{self, ManifestEntry};
use fedaudio_sim::{feature_file, report, runner, wav, ExperimentConfig, PoolExecutor, RunError};

#[derive(Parser)]
#[command(name = "fedaudio-sim", version, about = "Federated audio-classification simulation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Parallel client workers (overrides FEDAUDIO_SIM_WORKERS).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Partition a manifest's examples and write a per-client report CSV.
    Partition {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Scheme::ByKey)]
        scheme: Scheme,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 50)]
        n_clients: usize,
        #[arg(long, default_value_t = 1)]
        min_per_client: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_classes: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Add noise and/or label errors to a manifest's corpus.
    Corrupt {
        manifest: PathBuf,
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        error_ratio: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        error_sparsity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_classes: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Extract log-Mel features from a WAV file into a feature file.
    Features {
        wav: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        label: usize,
        #[arg(long, default_value = "unknown")]
        client: String,
        #[arg(long, default_value_t = 1024)]
        frame_length: usize,
        #[arg(long, default_value_t = 10.0)]
        hop_ms: f64,
        #[arg(long, default_value_t = 128)]
        n_mels: usize,
    },
    /// Summarize the per-seed JSONL logs of a run.
    Report {
        dir: PathBuf,
        #[arg(long, required = true)]
        target: Vec<f64>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Metric::Accuracy)]
        metric: Metric,
    },
    /// Write a synthetic corpus as WAV files plus a manifest.
    Synth {
        #[arg(long, default_value_t = 4)]
        n_classes: usize,
        #[arg(long, default_value_t = 20)]
        n_speakers: usize,
        #[arg(long, default_value_t = 5)]
        clips: usize,
        #[arg(long, default_value_t = 1.0)]
        clip_seconds: f64,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    ByKey,
    Dirichlet,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Accuracy,
    MacroF1,
}

type AnyError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let is_config = e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<RunError>(), Some(RunError::Config(_)));
            ExitCode::from(if is_config { 2 } else { 1 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), AnyError> {
    match cmd {
        Command::Run { config, workers } => {
            let cfg = ExperimentConfig::load(&config)?;
            let exec = workers.map_or_else(PoolExecutor::from_env, PoolExecutor::new);
            log::info!("{} with {} workers, config hash {}", cfg.experiment_id, exec.workers(), cfg.config_hash());
            let out = runner::run_experiment(&cfg, &exec)?;
            for row in &out.rows {
                let rt = row.rounds_to_target.map_or(String::new(), |r| format!("  rounds {r}"));
                println!("{:<20} {:.4} ({:.4}) n={}{rt}", row.metric_name, row.mean, row.std, row.n);
            }
            println!("results in {}", cfg.output_dir.display());
            Ok(())
        }
        Command::Partition { manifest, scheme, alpha, n_clients, min_per_client, seed, n_classes, out } => {
            let entries = manifest::read_manifest(&manifest)?;
            let k = class_count(&entries, n_classes)?;
            let labels: Vec<usize> = entries.iter().map(|e| e.label).collect();
            let groups: Vec<(String, Vec<usize>)> = match scheme {
                Scheme::ByKey => {
                    let keys: Vec<&str> = entries.iter().map(|e| e.client_key.as_str()).collect();
                    partition::group_by_key(&keys)?.into_iter().collect()
                }
                Scheme::Dirichlet => {
                    let spec = DirichletSpec { n_clients, alpha, min_per_client, seed };
                    partition::dirichlet_assign(&labels, k, &spec)?
                        .into_iter()
                        .enumerate()
                        .map(|(i, idx)| (partition::client_name(i), idx))
                        .collect()
                }
            };
            let mut w = csv::Writer::from_path(&out)?;
            let mut header = vec!["client_id".to_string(), "size".to_string()];
            header.extend((0..k).map(|c| format!("class_{c}")));
            w.write_record(&header)?;
            for (id, idx) in &groups {
                let counts = partition::class_counts(idx.iter().map(|&i| labels[i]), k);
                let mut rec = vec![id.clone(), idx.len().to_string()];
                rec.extend(counts.iter().map(usize::to_string));
                w.write_record(&rec)?;
            }
            w.flush()?;
            println!("{} clients written to {}", groups.len(), out.display());
            Ok(())
        }
        Command::Corrupt { manifest, snr_db, error_ratio, error_sparsity, seed, n_classes, out_dir } => {
            let entries = manifest::read_manifest(&manifest)?;
            let k = class_count(&entries, n_classes)?;
            fs::create_dir_all(&out_dir)?;
            let q = match error_ratio {
                Some(error_ratio) => {
                    let spec = LabelErrorSpec {
                        error_ratio,
                        error_sparsity,
                        seed: rng::derive_seed(seed, &[rng::TAG_LABELS, 0]),
                    };
                    spec.validate(k).map_err(|e| ConfigError::new("--error-sparsity", e.to_string()))?;
                    corruption::gen_transition_matrix(k, &spec)?
                }
                None => TransitionMatrix::identity(k),
            };
            // Example index within its client, in manifest order.
            let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
            let mut out_entries = Vec::with_capacity(entries.len());
            for (i, e) in entries.iter().enumerate() {
                let index = seen.entry(e.client_key.as_str()).or_insert(0);
                let label = corruption::resample_label(
                    &q,
                    e.label,
                    rng::derive_seed(seed, &[rng::TAG_LABELS, 1]),
                    &e.client_key,
                    *index,
                );
                *index += 1;
                let path = match snr_db {
                    Some(snr_db) => {
                        let clip = wav::load_wav(&e.path)?;
                        let spec = NoiseSpec { snr_db, seed: rng::derive_seed(seed, &[rng::TAG_NOISE, i as u64]) };
                        let noisy = corruption::inject_awgn(&clip, &spec)?;
                        let name =
                            e.path.file_name().map_or_else(|| format!("{i}.wav"), |n| n.to_string_lossy().into_owned());
                        let dst = out_dir.join(format!("{i:06}_{name}"));
                        wav::write_wav(&dst, &noisy)?;
                        dst
                    }
                    None => e.path.clone(),
                };
                out_entries.push(ManifestEntry { path, label, client_key: e.client_key.clone() });
            }
            manifest::write_manifest(out_dir.join("manifest.tsv"), &out_entries)?;
            let mut w = csv::Writer::from_path(out_dir.join("q.csv"))?;
            for i in 0..q.k() {
                w.write_record(q.row(i).iter().map(f64::to_string))?;
            }
            w.flush()?;
            println!("{} examples written to {}", out_entries.len(), out_dir.display());
            Ok(())
        }
        Command::Features { wav: path, out, label, client, frame_length, hop_ms, n_mels } => {
            let clip = wav::load_wav(&path)?;
            let cfg = FeatureConfig { frame_length, hop_ms, n_mels, ..FeatureConfig::default() };
            let m = MelExtractor::new(&cfg, clip.sample_rate())?.extract(&clip)?;
            feature_file::write_feature_file(&out, &m, label, &client)?;
            println!("{}x{} features written to {}", m.frames(), m.dims(), out.display());
            Ok(())
        }
        Command::Report { dir, target, baseline, metric } => {
            let trials = report::read_log_dir(&dir)?;
            let base = baseline.as_deref().map(report::read_log_dir).transpose()?;
            let metric = match metric {
                Metric::Accuracy => MetricKind::Accuracy,
                Metric::MacroF1 => MetricKind::F1,
            };
            print!("{}", report::render_report(&trials, &target, metric, base.as_deref())?);
            Ok(())
        }
        Command::Synth { n_classes, n_speakers, clips, clip_seconds, sample_rate, seed, out_dir } => {
            let spec = SynthCorpusSpec {
                n_classes,
                n_speakers,
                clips_per_speaker_per_class: clips,
                clip_seconds,
                sample_rate,
                seed,
            };
            let corpus = audio::synth_corpus(&spec)?;
            fs::create_dir_all(&out_dir)?;
            let mut entries = Vec::with_capacity(corpus.len());
            for (i, c) in corpus.iter().enumerate() {
                let path = out_dir.join(format!("{}_{i:05}_c{}.wav", c.speaker_id, c.label));
                wav::write_wav(&path, &c.clip)?;
                entries.push(ManifestEntry { path, label: c.label, client_key: c.speaker_id.clone() });
            }
            manifest::write_manifest(out_dir.join("manifest.tsv"), &entries)?;
            println!("{} clips written to {}", entries.len(), out_dir.display());
            Ok(())
        }
    }
}

fn class_count(entries: &[ManifestEntry], declared: Option<usize>) -> Result<usize, AnyError> {
    let max = entries.iter().map(|e| e.label).max().unwrap_or(0);
    match declared {
        Some(k) if max >= k => Err(format!("label {max} is not below --n-classes {k}").into()),
        Some(k) => Ok(k),
        None => Ok(max + 1),
    }
}
