//! Data noise and label errors.
//!
//! * [`inject_awgn`] adds white Gaussian noise at a target SNR to raw audio.
//! * [`gen_transition_matrix`] builds a row-stochastic `Q` with a prescribed
//!   per-row error ratio (`1 - Q_ii`) and off-diagonal zero fraction (error
//!   sparsity); [`apply_label_errors`] resamples training labels from `Q`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Exp1, StandardNormal};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::partition::Shards;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorruptionError {
    #[error("clip has zero signal power; SNR is undefined")]
    SilentClip,
    #[error("SNR must be finite")]
    NonFiniteSnr,
    #[error("clips differ in length or sample rate")]
    LengthMismatch,
    #[error("noisy clip equals the original; SNR is infinite")]
    ZeroNoise,
    #[error("infeasible label-error spec: {0}")]
    InfeasibleSpec(&'static str),
    #[error("transition matrix has {q} classes, dataset has {dataset}")]
    ClassCountMismatch { q: usize, dataset: usize },
    #[error("invalid transition matrix: {0}")]
    InvalidMatrix(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub seed: u64,
}

/// Adds zero-mean white Gaussian noise whose power is exactly
/// `P_s / 10^(snr_db / 10)`.
///
/// A standard-normal sequence is drawn and then rescaled so its realized mean
/// square equals the target noise power; the measured SNR therefore equals the
/// target up to rounding. The sum is not clipped.
pub fn inject_awgn(clip: &AudioClip, spec: &NoiseSpec) -> Result<AudioClip, CorruptionError> {
    if !spec.snr_db.is_finite() {
        return Err(CorruptionError::NonFiniteSnr);
    }
    let signal_power = clip.power();
    if !(signal_power > 0.0) {
        return Err(CorruptionError::SilentClip);
    }
    let noise_power = signal_power / libm::pow(10.0, spec.snr_db / 10.0);
    let mut r = rng::derived_stream(spec.seed, &[rng::TAG_NOISE]);
    let raw: Vec<f64> = (0..clip.len()).map(|_| StandardNormal.sample(&mut r)).collect();
    let raw_power = raw.iter().map(|x| x * x).sum::<f64>() / raw.len() as f64;
    let scale = libm::sqrt(noise_power / raw_power);
    let samples = clip.samples().iter().zip(&raw).map(|(s, n)| s + scale * n).collect();
    AudioClip::new_unbounded(samples, clip.sample_rate()).map_err(|_| CorruptionError::LengthMismatch)
}

/// `10 log10(mean(orig^2) / mean((noisy - orig)^2))`.
pub fn measure_snr(original: &AudioClip, noisy: &AudioClip) -> Result<f64, CorruptionError> {
    if original.len() != noisy.len() || original.sample_rate() != noisy.sample_rate() {
        return Err(CorruptionError::LengthMismatch);
    }
    let noise_power = original.samples().iter().zip(noisy.samples()).map(|(o, n)| (n - o) * (n - o)).sum::<f64>()
        / original.len().max(1) as f64;
    if !(noise_power > 0.0) {
        return Err(CorruptionError::ZeroNoise);
    }
    Ok(10.0 * libm::log10(original.power() / noise_power))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LabelErrorSpec {
    pub error_ratio: f64,
    pub error_sparsity: f64,
    pub seed: u64,
}

impl LabelErrorSpec {
    /// Number of exact zeros the generator places off the diagonal.
    pub fn zero_budget(&self, k: usize) -> usize {
        let cells = k * (k - 1);
        libm::round(self.error_sparsity * cells as f64) as usize
    }

    pub fn validate(&self, k: usize) -> Result<(), CorruptionError> {
        if k < 2 {
            return Err(CorruptionError::InfeasibleSpec("need at least two classes"));
        }
        if !(0.0..1.0).contains(&self.error_ratio) {
            return Err(CorruptionError::InfeasibleSpec("error_ratio must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.error_sparsity) {
            return Err(CorruptionError::InfeasibleSpec("error_sparsity must lie in [0, 1]"));
        }
        if self.error_ratio > 0.0 {
            if self.error_sparsity >= 1.0 {
                return Err(CorruptionError::InfeasibleSpec(
                    "error_sparsity 1 means no label errors; error_ratio must be 0",
                ));
            }
            let nonzero = k * (k - 1) - self.zero_budget(k);
            if nonzero < k {
                return Err(CorruptionError::InfeasibleSpec("sparsity leaves some row without an off-diagonal entry"));
            }
        }
        Ok(())
    }
}

/// Row-stochastic `K x K` matrix, `q[i][j] = P(observed j | true i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    k: usize,
    q: Vec<f64>,
}

/// Row-sum tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

impl TransitionMatrix {
    pub fn new(k: usize, q: Vec<f64>) -> Result<Self, CorruptionError> {
        if k == 0 || q.len() != k * k {
            return Err(CorruptionError::InvalidMatrix("shape is not K x K"));
        }
        if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CorruptionError::InvalidMatrix("entries must lie in [0, 1]"));
        }
        if q.chunks(k).any(|row| (row.iter().sum::<f64>() - 1.0).abs() > ROW_SUM_TOL) {
            return Err(CorruptionError::InvalidMatrix("rows must sum to 1"));
        }
        Ok(Self { k, q })
    }

    pub fn identity(k: usize) -> Self {
        let mut q = vec![0.0; k * k];
        (0..k).for_each(|i| q[i * k + i] = 1.0);
        Self { k, q }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.q[i * self.k..(i + 1) * self.k]
    }

    /// Inverse-CDF draw from row `from` for a uniform `u` in [0, 1).
    pub fn sample_row(&self, from: usize, u: f64) -> usize {
        let row = self.row(from);
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // u landed in the rounding gap at the top: take the last reachable class.
        row.iter().rposition(|&p| p > 0.0).unwrap_or(from)
    }
}

/// Generates `Q` with `Q_ii = 1 - error_ratio` on every row and exactly
/// `round(sparsity * K(K-1))` zeros off the diagonal.
///
/// Nonzero off-diagonal cells are spread over rows as evenly as possible; the
/// rows that receive one extra cell, and which columns are used inside each
/// row, come from seeded shuffles. Each row's error mass is split over its
/// cells by a uniform simplex draw (normalized exponentials).
pub fn gen_transition_matrix(k: usize, spec: &LabelErrorSpec) -> Result<TransitionMatrix, CorruptionError> {
    spec.validate(k)?;
    if spec.error_ratio == 0.0 {
        return Ok(TransitionMatrix::identity(k));
    }
    let mut r = rng::derived_stream(spec.seed, &[rng::TAG_LABELS, k as u64]);
    let nonzero = k * (k - 1) - spec.zero_budget(k);
    let (base, extra) = (nonzero / k, nonzero % k);
    let mut rows: Vec<usize> = (0..k).collect();
    rows.shuffle(&mut r);
    let mut per_row = vec![base; k];
    for &i in &rows[..extra] {
        per_row[i] += 1;
    }
    let diag = 1.0 - spec.error_ratio;
    let mut q = vec![0.0; k * k];
    for i in 0..k {
        q[i * k + i] = diag;
        let mut cols: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        cols.shuffle(&mut r);
        let chosen = &cols[..per_row[i]];
        let weights: Vec<f64> = loop {
            let w: Vec<f64> = chosen.iter().map(|_| Exp1.sample(&mut r)).collect();
            if w.iter().all(|&x| x > 0.0) {
                break w;
            }
        };
        let total: f64 = weights.iter().sum();
        for (&j, w) in chosen.iter().zip(&weights) {
            q[i * k + j] = spec.error_ratio * w / total;
        }
    }
    TransitionMatrix::new(k, q)
}

/// Per-row error ratio and matrix-level error sparsity of `q`.
pub fn q_stats(q: &TransitionMatrix) -> (Vec<f64>, f64) {
    let k = q.k();
    let ratios = (0..k).map(|i| 1.0 - q.get(i, i)).collect();
    if k < 2 {
        return (ratios, 1.0);
    }
    let zeros = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .filter(|&(i, j)| q.get(i, j) == 0.0)
        .count();
    (ratios, zeros as f64 / (k * (k - 1)) as f64)
}

/// Uniform draw for example `index` of client `client` under `seed`.
fn label_draw(seed: u64, client: &str, index: usize) -> f64 {
    rng::unit_f64(rng::derive_seed(seed, &[rng::TAG_LABELS, rng::key_hash(client), index as u64]))
}

/// Corrupted label for example `index` of client `client`; the same draw
/// [`apply_label_errors`] uses.
pub fn resample_label(q: &TransitionMatrix, label: usize, seed: u64, client: &str, index: usize) -> usize {
    q.sample_row(label, label_draw(seed, client, index))
}

/// Resamples every training label from its row of `q`. Features, shard
/// membership and sizes are untouched; the draw for each example depends only
/// on `(seed, client id, index within shard)`.
pub fn apply_label_errors(
    clients: &Shards,
    n_classes: usize,
    q: &TransitionMatrix,
    seed: u64,
) -> Result<Shards, CorruptionError> {
    if q.k() != n_classes {
        return Err(CorruptionError::ClassCountMismatch { q: q.k(), dataset: n_classes });
    }
    let mut out = clients.clone();
    for (id, shard) in out.iter_mut() {
        for (i, ex) in shard.iter_mut().enumerate() {
            if ex.label >= n_classes {
                return Err(CorruptionError::ClassCountMismatch { q: q.k(), dataset: ex.label + 1 });
            }
            ex.label = resample_label(q, ex.label, seed, id, i);
        }
    }
    Ok(out)
}
