//! Cross-seed summaries, round-to-target rows and the summary CSV.

use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use fedaudio_core::fl::RoundRecord;
use fedaudio_core::metrics::{self, MetricKind, MetricSummary, RoundToTarget};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}:{line}: {source}")]
    BadRecord { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("no seed_*.jsonl logs in {0}")]
    NoLogs(PathBuf),
    #[error("{0} has no records")]
    EmptyLog(PathBuf),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Per-seed log path inside an output directory.
pub fn seed_log_path(dir: &Path, trial: usize) -> PathBuf {
    dir.join(format!("seed_{trial:03}.jsonl"))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RoundRecord>, ReportError> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| ReportError::BadRecord {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(ReportError::EmptyLog(path.to_path_buf()));
    }
    Ok(out)
}

/// All `seed_*.jsonl` logs in `dir`, in file-name order.
pub fn read_log_dir(dir: &Path) -> Result<Vec<Vec<RoundRecord>>, ReportError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed_") && n.ends_with(".jsonl"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ReportError::NoLogs(dir.to_path_buf()));
    }
    paths.iter().map(|p| read_jsonl(p)).collect()
}

/// Per-round metric averaged over seeds, truncated to the shortest log.
pub fn mean_curve(trials: &[Vec<RoundRecord>], metric: MetricKind) -> Vec<f64> {
    let len = trials.iter().map(Vec::len).min().unwrap_or(0);
    (0..len).map(|r| trials.iter().map(|t| metric.of(&t[r])).sum::<f64>() / trials.len() as f64).collect()
}

/// Round-to-target on the seed-averaged curve.
pub fn mean_round_to_target(trials: &[Vec<RoundRecord>], target: f64, metric: MetricKind) -> RoundToTarget {
    let rounds = mean_curve(trials, metric).iter().position(|&v| v >= target).map(|i| i + 1);
    RoundToTarget { target, rounds, baseline_rounds: None, ratio: None }
}

/// Final-round metric of every seed.
pub fn final_values(trials: &[Vec<RoundRecord>], metric: MetricKind) -> Vec<f64> {
    trials.iter().filter_map(|t| t.last()).map(|r| metric.of(r)).collect()
}

/// Fields identifying the experiment on every CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowContext {
    pub experiment_id: String,
    pub optimizer: String,
    pub sample_ratio: f64,
    pub snr_db: Option<f64>,
    pub error_ratio: Option<f64>,
    pub error_sparsity: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub experiment_id: String,
    pub optimizer: String,
    pub sample_ratio: f64,
    pub snr_db: Option<f64>,
    pub error_ratio: Option<f64>,
    pub error_sparsity: Option<f64>,
    pub alpha: Option<f64>,
    pub metric_name: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub rounds_to_target: Option<usize>,
    pub baseline_rounds: Option<usize>,
    pub ratio: Option<f64>,
    pub config_hash: String,
}

impl SummaryRow {
    fn new(ctx: &RowContext, metric_name: String, s: &MetricSummary, hash: &str) -> Self {
        Self {
            experiment_id: ctx.experiment_id.clone(),
            optimizer: ctx.optimizer.clone(),
            sample_ratio: ctx.sample_ratio,
            snr_db: ctx.snr_db,
            error_ratio: ctx.error_ratio,
            error_sparsity: ctx.error_sparsity,
            alpha: ctx.alpha,
            metric_name,
            mean: s.mean,
            std: s.std,
            n: s.n,
            rounds_to_target: None,
            baseline_rounds: None,
            ratio: None,
            config_hash: hash.into(),
        }
    }
}

/// One row per final metric (accuracy, macro-F1), then one row per target
/// named `<metric>@<target>` that repeats the final-metric summary and adds the
/// round-to-target counts of the seed-averaged curve.
pub fn summary_rows(
    ctx: &RowContext,
    trials: &[Vec<RoundRecord>],
    targets: &[f64],
    target_metric: MetricKind,
    baseline: Option<&[Vec<RoundRecord>]>,
    config_hash: &str,
) -> Result<Vec<SummaryRow>, metrics::MetricError> {
    let mut rows = Vec::new();
    for metric in [MetricKind::Accuracy, MetricKind::F1] {
        let s = metrics::summarize(&final_values(trials, metric))?;
        rows.push(SummaryRow::new(ctx, metric.name().into(), &s, config_hash));
    }
    let s = metrics::summarize(&final_values(trials, target_metric))?;
    for &target in targets {
        let base = baseline.and_then(|b| mean_round_to_target(b, target, target_metric).rounds);
        let rt = mean_round_to_target(trials, target, target_metric).with_baseline(base);
        let mut row = SummaryRow::new(ctx, format!("{}@{target}", target_metric.name()), &s, config_hash);
        row.rounds_to_target = rt.rounds;
        row.baseline_rounds = rt.baseline_rounds;
        row.ratio = rt.ratio;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text report: mean ± std per metric, deltas against the baseline and
/// round-to-target counts with their baseline ratio.
pub fn render_report(
    trials: &[Vec<RoundRecord>],
    targets: &[f64],
    metric: MetricKind,
    baseline: Option<&[Vec<RoundRecord>]>,
) -> Result<String, metrics::MetricError> {
    let mut out = String::new();
    let total = trials.iter().map(Vec::len).min().unwrap_or(0);
    out.push_str(&format!("seeds: {}  rounds: {total}\n", trials.len()));
    let acc = metrics::summarize(&final_values(trials, MetricKind::Accuracy))?;
    let f1 = metrics::summarize(&final_values(trials, MetricKind::F1))?;
    out.push_str(&format!("final accuracy: {acc}\nfinal macro-F1: {f1}\n"));
    if let Some(b) = baseline {
        let b_acc = metrics::summarize(&final_values(b, MetricKind::Accuracy))?;
        let b_f1 = metrics::summarize(&final_values(b, MetricKind::F1))?;
        out.push_str(&format!(
            "vs baseline: accuracy {} / macro-F1 {}\n",
            metrics::render_delta(&b_acc, &acc),
            metrics::render_delta(&b_f1, &f1)
        ));
    }
    for &target in targets {
        let base = baseline.and_then(|b| mean_round_to_target(b, target, metric).rounds);
        let rt = mean_round_to_target(trials, target, metric).with_baseline(base);
        out.push_str(&format!("rounds to {} {target}: {}\n", metric.name(), rt.render(total)));
    }
    Ok(out)
}
