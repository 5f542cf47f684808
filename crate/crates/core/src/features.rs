//! Log-Mel front end: Hamming window, radix-2 power spectrum, triangular Mel
//! filterbank, framing, segmentation and z-normalization.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use thiserror::Error;

use crate::audio::AudioClip;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("window length {0} is below 2")]
    InvalidLength(usize),
    #[error("frame length {0} is not a power of two >= 2")]
    BadFrameLength(usize),
    #[error("Mel filter {filter} has no FFT bin under it; use fewer Mel bands or a longer frame")]
    TooManyMels { filter: usize },
    #[error("clip has {len} samples, fewer than one frame of {frame_length}")]
    ClipTooShort { len: usize, frame_length: usize },
    #[error("segment of {seg_samples} samples does not fit in a clip of {len}")]
    SegmentLongerThanClip { seg_samples: usize, len: usize },
    #[error("invalid feature configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("normalization needs at least one training frame")]
    EmptyTrainingSet,
    #[error("expected {expected} values, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("feature values must be finite")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FeatureConfig {
    pub frame_length: usize,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { frame_length: 1024, hop_ms: 10.0, n_mels: 128, log_floor: 1e-6 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.frame_length < 2 || !self.frame_length.is_power_of_two() {
            return Err(FeatureError::BadFrameLength(self.frame_length));
        }
        if !(self.hop_ms > 0.0) || !self.hop_ms.is_finite() {
            return Err(FeatureError::InvalidConfig("hop_ms must be positive"));
        }
        if self.n_mels == 0 {
            return Err(FeatureError::InvalidConfig("n_mels must be at least 1"));
        }
        if !(self.log_floor > 0.0) || !self.log_floor.is_finite() {
            return Err(FeatureError::InvalidConfig("log_floor must be positive"));
        }
        Ok(())
    }

    /// Hop in samples: `round(hop_ms * rate / 1000)`, never below one.
    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        let hop = libm::round(self.hop_ms * f64::from(sample_rate) / 1000.0) as usize;
        hop.max(1)
    }
}

/// Row-major `frames x dims` matrix of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dims: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dims: usize, values: Vec<f64>) -> Result<Self, FeatureError> {
        let expected = frames * dims;
        if values.len() != expected {
            return Err(FeatureError::DimensionMismatch { expected, actual: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(Self { frames, dims, values })
    }

    pub fn zeros(frames: usize, dims: usize) -> Self {
        Self { frames, dims, values: vec![0.0; frames * dims] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.dims..(frame + 1) * self.dims]
    }

    pub fn get(&self, frame: usize, dim: usize) -> f64 {
        self.values[frame * self.dims + dim]
    }

    /// Per-dimension mean over frames.
    pub fn mean_over_frames(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dims];
        for f in 0..self.frames {
            for (a, v) in acc.iter_mut().zip(self.row(f)) {
                *a += v;
            }
        }
        let n = self.frames.max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Symmetric Hamming window `0.54 - 0.46 cos(2 pi k / (n - 1))`.
pub fn hamming_window(n: usize) -> Result<Vec<f64>, FeatureError> {
    if n < 2 {
        return Err(FeatureError::InvalidLength(n));
    }
    let denom = (n - 1) as f64;
    Ok((0..n).map(|k| 0.54 - 0.46 * libm::cos(2.0 * PI * k as f64 / denom)).collect())
}

/// In-place iterative radix-2 decimation-in-time FFT. `re.len()` must be a
/// power of two.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = -2.0 * PI / len as f64;
        for k in 0..half {
            let (s, c) = libm::sincos(step * k as f64);
            for start in (0..n).step_by(len) {
                let a = start + k;
                let b = a + half;
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// `|X[k]|^2` for `k` in `0..=N/2` of a real frame of power-of-two length `N`.
pub fn power_spectrum(frame: &[f64]) -> Result<Vec<f64>, FeatureError> {
    let n = frame.len();
    if n < 2 || !n.is_power_of_two() {
        return Err(FeatureError::BadFrameLength(n));
    }
    let mut re = frame.to_vec();
    let mut im = vec![0.0; n];
    fft_in_place(&mut re, &mut im);
    Ok((0..=n / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect())
}

/// HTK Mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// `n_mels x (n_fft/2 + 1)` triangular filters, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Projects a power spectrum onto the Mel bands.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins);
        for (m, o) in out.iter_mut().enumerate().take(self.n_mels) {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Plain (not area-normalized) triangles with centers equally spaced in Mel
/// between 0 Hz and Nyquist. Each triangle is evaluated at the exact bin
/// frequencies `k * rate / n_fft`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Result<MelFilterbank, FeatureError> {
    if n_mels == 0 {
        return Err(FeatureError::InvalidConfig("n_mels must be at least 1"));
    }
    if n_fft < 2 {
        return Err(FeatureError::BadFrameLength(n_fft));
    }
    if sample_rate == 0 {
        return Err(FeatureError::InvalidConfig("sample_rate must be positive"));
    }
    let n_bins = n_fft / 2 + 1;
    let rate = f64::from(sample_rate);
    let mel_max = hz_to_mel(rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64)).collect();
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * rate / n_fft as f64;
            *w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w <= 0.0) {
            return Err(FeatureError::TooManyMels { filter: m });
        }
    }
    Ok(MelFilterbank { n_mels, n_bins, weights, centers_hz: edges[1..=n_mels].to_vec() })
}

/// Reusable extractor: window and filterbank are built once per
/// (config, sample rate) pair.
#[derive(Debug, Clone)]
pub struct MelExtractor {
    cfg: FeatureConfig,
    sample_rate: u32,
    window: Vec<f64>,
    filterbank: MelFilterbank,
}

impl MelExtractor {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self, FeatureError> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            window: hamming_window(cfg.frame_length)?,
            filterbank: mel_filterbank(cfg.n_mels, cfg.frame_length, sample_rate)?,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.cfg.frame_length {
            return 0;
        }
        (n_samples - self.cfg.frame_length) / self.cfg.hop_samples(self.sample_rate) + 1
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix, FeatureError> {
        if clip.sample_rate() != self.sample_rate {
            return Err(FeatureError::InvalidConfig("clip sample rate differs from extractor"));
        }
        let n = self.cfg.frame_length;
        let samples = clip.samples();
        if samples.len() < n {
            return Err(FeatureError::ClipTooShort { len: samples.len(), frame_length: n });
        }
        let hop = self.cfg.hop_samples(self.sample_rate);
        let frames = self.n_frames(samples.len());
        let dims = self.cfg.n_mels;
        let mut values = vec![0.0; frames * dims];
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        let mut power = vec![0.0; n / 2 + 1];
        for f in 0..frames {
            let frame = &samples[f * hop..f * hop + n];
            for ((r, s), w) in re.iter_mut().zip(frame).zip(&self.window) {
                *r = s * w;
            }
            im.iter_mut().for_each(|v| *v = 0.0);
            fft_in_place(&mut re, &mut im);
            for (k, p) in power.iter_mut().enumerate() {
                *p = re[k] * re[k] + im[k] * im[k];
            }
            let out = &mut values[f * dims..(f + 1) * dims];
            self.filterbank.apply(&power, out);
            for v in out.iter_mut() {
                *v = libm::log(*v + self.cfg.log_floor);
            }
        }
        FeatureMatrix::new(frames, dims, values)
    }
}

/// One-shot log-Mel extraction. Prefer [`MelExtractor`] for many clips.
pub fn extract_mel(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureMatrix, FeatureError> {
    MelExtractor::new(cfg, clip.sample_rate())?.extract(clip)
}

/// Splits a clip into fully contained, possibly overlapping segments starting
/// at multiples of `seg_seconds - overlap_seconds`.
pub fn segment_clip(clip: &AudioClip, seg_seconds: f64, overlap_seconds: f64) -> Result<Vec<AudioClip>, FeatureError> {
    if !(overlap_seconds >= 0.0) || !(overlap_seconds < seg_seconds) || !seg_seconds.is_finite() {
        return Err(FeatureError::InvalidConfig("need 0 <= overlap < segment length"));
    }
    let rate = f64::from(clip.sample_rate());
    let seg = libm::round(seg_seconds * rate) as usize;
    let step = libm::round((seg_seconds - overlap_seconds) * rate) as usize;
    if seg == 0 || step == 0 {
        return Err(FeatureError::InvalidConfig("segment or step shorter than one sample"));
    }
    let len = clip.len();
    if seg > len {
        return Err(FeatureError::SegmentLongerThanClip { seg_samples: seg, len });
    }
    let count = (len - seg) / step + 1;
    let samples = clip.samples();
    (0..count)
        .map(|i| {
            AudioClip::new_unbounded(samples[i * step..i * step + seg].to_vec(), clip.sample_rate())
                .map_err(|_| FeatureError::InvalidConfig("sample rate"))
        })
        .collect()
}

/// Per-dimension statistics computed over every training frame.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Lower bound on the divisor so constant dimensions map to zero.
pub const STD_EPS: f64 = 1e-8;

impl NormStats {
    pub fn fit(train: &[FeatureMatrix]) -> Result<Self, FeatureError> {
        let dims = train.first().ok_or(FeatureError::EmptyTrainingSet)?.dims();
        let mut count = 0usize;
        let mut mean = vec![0.0; dims];
        for m in train {
            check_dims(m, dims)?;
            for f in 0..m.frames() {
                for (a, v) in mean.iter_mut().zip(m.row(f)) {
                    *a += v;
                }
            }
            count += m.frames();
        }
        if count == 0 {
            return Err(FeatureError::EmptyTrainingSet);
        }
        mean.iter_mut().for_each(|a| *a /= count as f64);
        let mut var = vec![0.0; dims];
        for m in train {
            for f in 0..m.frames() {
                for ((a, v), mu) in var.iter_mut().zip(m.row(f)).zip(&mean) {
                    *a += (v - mu) * (v - mu);
                }
            }
        }
        let std = var.iter().map(|v| libm::sqrt(v / count as f64)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix, FeatureError> {
        let dims = self.mean.len();
        check_dims(m, dims)?;
        let mut out = m.clone();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            let d = i % dims;
            *v = (*v - self.mean[d]) / self.std[d].max(STD_EPS);
        }
        Ok(out)
    }
}

fn check_dims(m: &FeatureMatrix, dims: usize) -> Result<(), FeatureError> {
    if m.dims() != dims {
        return Err(FeatureError::DimensionMismatch { expected: dims, actual: m.dims() });
    }
    Ok(())
}

/// Fits statistics on `train` and applies them to both lists.
pub fn znormalize(
    train: &[FeatureMatrix],
    others: &[FeatureMatrix],
) -> Result<(Vec<FeatureMatrix>, Vec<FeatureMatrix>, NormStats), FeatureError> {
    let stats = NormStats::fit(train)?;
    let t = train.iter().map(|m| stats.apply(m)).collect::<Result<_, _>>()?;
    let o = others.iter().map(|m| stats.apply(m)).collect::<Result<_, _>>()?;
    Ok((t, o, stats))
}
