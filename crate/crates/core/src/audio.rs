//! Audio clips and the seeded synthetic corpus.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AudioError {
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("sample {index} = {value} lies outside [-1, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(&'static str),
}

/// Mono PCM samples at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip whose samples must all lie in [-1, 1].
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        if let Some((index, &value)) = samples.iter().enumerate().find(|(_, s)| !(-1.0..=1.0).contains(*s)) {
            return Err(AudioError::OutOfRange { index, value });
        }
        Ok(Self { samples, sample_rate })
    }

    /// Builds a clip without the amplitude check. Corrupted audio (signal plus
    /// noise) is allowed to leave [-1, 1].
    pub fn new_unbounded(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub clip: AudioClip,
    pub label: usize,
    pub speaker_id: String,
}

/// Parameters of the synthetic stand-in corpus.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthCorpusSpec {
    pub n_classes: usize,
    pub n_speakers: usize,
    pub clips_per_speaker_per_class: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

/// Class `c` places its partials in `[BAND_LOW + BAND_STEP*c, BAND_LOW + BAND_STEP*c + BAND_WIDTH]` Hz.
pub const BAND_LOW_HZ: f64 = 300.0;
pub const BAND_STEP_HZ: f64 = 400.0;
pub const BAND_WIDTH_HZ: f64 = 200.0;
/// Speakers scale every frequency by a factor in `1 ± PITCH_SPREAD`.
pub const PITCH_SPREAD: f64 = 0.12;
pub const PARTIALS: usize = 3;
pub const DITHER_STD: f64 = 1e-3;
/// Class-independent voicing: harmonics of `VOICE_F0_HZ * pitch`, all below
/// the lowest class band.
pub const VOICE_F0_HZ: f64 = 110.0;
pub const VOICE_HARMONICS: usize = 2;
/// Power of the class partials relative to the voicing, in dB.
pub const CUE_LEVEL_DB: f64 = -30.0;

impl SynthCorpusSpec {
    pub fn validate(&self) -> Result<(), AudioError> {
        if self.n_classes == 0 || self.n_speakers == 0 || self.clips_per_speaker_per_class == 0 {
            return Err(AudioError::InvalidSpec("counts must be at least 1"));
        }
        if !(self.clip_seconds > 0.0) || !self.clip_seconds.is_finite() {
            return Err(AudioError::InvalidSpec("clip_seconds must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(AudioError::InvalidSpec("sample_rate must be positive"));
        }
        let top = class_band(self.n_classes - 1).1 * (1.0 + PITCH_SPREAD);
        if top >= f64::from(self.sample_rate) / 2.0 {
            return Err(AudioError::InvalidSpec("class bands exceed the Nyquist frequency"));
        }
        Ok(())
    }

    pub fn n_clips(&self) -> usize {
        self.n_classes * self.n_speakers * self.clips_per_speaker_per_class
    }

    pub fn samples_per_clip(&self) -> usize {
        libm::round(self.clip_seconds * f64::from(self.sample_rate)) as usize
    }
}

/// Frequency band (Hz) of class `c` before the speaker's pitch factor.
pub fn class_band(c: usize) -> (f64, f64) {
    let lo = BAND_LOW_HZ + BAND_STEP_HZ * c as f64;
    (lo, lo + BAND_WIDTH_HZ)
}

pub fn speaker_key(s: usize) -> String {
    format!("spk{s:03}")
}

/// Pitch factor of speaker `s` in corpus `seed`.
pub fn speaker_pitch(seed: u64, s: usize) -> f64 {
    let mut r = rng::derived_stream(seed, &[rng::TAG_CORPUS, s as u64]);
    1.0 + r.random_range(-PITCH_SPREAD..=PITCH_SPREAD)
}

/// Generates the corpus, speaker-major then class then clip.
///
/// Each clip is a sum of [`PARTIALS`] sinusoids drawn inside the class band,
/// scaled by the speaker's pitch factor, over a louder class-independent
/// voicing (two low harmonics of the speaker's fundamental), with random
/// phases and a random overall level, plus Gaussian dither. The voicing holds
/// most of the power, so noise at a given SNR reaches the class cue. Every clip
/// has its own derived RNG stream, so the output is a pure function of the
/// spec.
pub fn synth_corpus(spec: &SynthCorpusSpec) -> Result<Vec<LabeledClip>, AudioError> {
    spec.validate()?;
    let n = spec.samples_per_clip();
    let rate = f64::from(spec.sample_rate);
    let mut out = Vec::with_capacity(spec.n_clips());
    for s in 0..spec.n_speakers {
        let pitch = speaker_pitch(spec.seed, s);
        let speaker_id = speaker_key(s);
        for c in 0..spec.n_classes {
            let (lo, hi) = class_band(c);
            for k in 0..spec.clips_per_speaker_per_class {
                let mut r = rng::derived_stream(spec.seed, &[rng::TAG_CORPUS, s as u64, c as u64, k as u64]);
                let mut partials = [(0.0f64, 0.0f64, 0.0f64); PARTIALS];
                for p in partials.iter_mut() {
                    let freq = r.random_range(lo..=hi) * pitch;
                    let amp = r.random_range(0.5..=1.0);
                    let phase = r.random_range(0.0..2.0 * PI);
                    *p = (freq, amp, phase);
                }
                let mut voice = [(0.0f64, 0.0f64, 0.0f64); VOICE_HARMONICS];
                for (h, v) in voice.iter_mut().enumerate() {
                    let k = (h + 1) as f64;
                    *v = (VOICE_F0_HZ * pitch * k, 1.0 / k, r.random_range(0.0..2.0 * PI));
                }
                // Scale the partials to CUE_LEVEL_DB below the voicing, then
                // the sum to a random peak-safe level.
                let power = |tones: &[(f64, f64, f64)]| tones.iter().map(|t| t.1 * t.1 / 2.0).sum::<f64>();
                let cue_gain = libm::sqrt(power(&voice) / power(&partials) * libm::pow(10.0, CUE_LEVEL_DB / 10.0));
                partials.iter_mut().for_each(|p| p.1 *= cue_gain);
                let peak: f64 = partials.iter().chain(&voice).map(|t| t.1).sum();
                let level: f64 = r.random_range(0.3..=0.9);
                let gain = level / peak;
                let samples = (0..n)
                    .map(|t| {
                        let time = t as f64 / rate;
                        let tone: f64 = partials
                            .iter()
                            .chain(&voice)
                            .map(|&(f, a, ph)| a * libm::sin(2.0 * PI * f * time + ph))
                            .sum();
                        let dither: f64 = StandardNormal.sample(&mut r);
                        (gain * tone + DITHER_STD * dither).clamp(-1.0, 1.0)
                    })
                    .collect();
                out.push(LabeledClip {
                    clip: AudioClip::new(samples, spec.sample_rate)?,
                    label: c,
                    speaker_id: speaker_id.clone(),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SynthCorpusSpec {
        SynthCorpusSpec {
            n_classes: 4,
            n_speakers: 20,
            clips_per_speaker_per_class: 5,
            clip_seconds: 0.1,
            sample_rate: 16_000,
            seed,
        }
    }

    #[test]
    fn clip_rejects_out_of_range() {
        assert!(matches!(AudioClip::new(vec![0.0, 1.5], 8000), Err(AudioError::OutOfRange { index: 1, .. })));
        assert_eq!(AudioClip::new(vec![], 0), Err(AudioError::ZeroSampleRate));
        let c = AudioClip::new(vec![0.0; 8000], 16000).unwrap();
        assert_eq!(c.duration_seconds(), 0.5);
    }

    #[test]
    fn corpus_count() {
        let spec = SynthCorpusSpec { clip_seconds: 1.0, seed: 7, ..small_spec(7) };
        assert_eq!(spec.n_clips(), 400);
        let corpus = synth_corpus(&SynthCorpusSpec { clip_seconds: 0.02, ..spec }).unwrap();
        assert_eq!(corpus.len(), 400);
        assert!(corpus.iter().all(|c| c.label < 4));
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = synth_corpus(&small_spec(7)).unwrap();
        let b = synth_corpus(&small_spec(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_change_the_stream() {
        let a = synth_corpus(&small_spec(1)).unwrap();
        let b = synth_corpus(&small_spec(2)).unwrap();
        let sa: Vec<f64> = a.iter().flat_map(|c| c.clip.samples().iter().copied()).take(1000).collect();
        let sb: Vec<f64> = b.iter().flat_map(|c| c.clip.samples().iter().copied()).take(1000).collect();
        assert!(sa.iter().zip(&sb).all(|(x, y)| x != y));
    }

    #[test]
    fn class_cue_sits_below_the_voicing() {
        // 1 s clips give 1 Hz DFT bins; sum Hann-windowed power below and
        // inside the class bands.
        let spec = SynthCorpusSpec {
            n_classes: 2,
            n_speakers: 1,
            clips_per_speaker_per_class: 1,
            clip_seconds: 1.0,
            ..small_spec(4)
        };
        let split = BAND_LOW_HZ * (1.0 - PITCH_SPREAD);
        for c in synth_corpus(&spec).unwrap() {
            let n = c.clip.len() as f64;
            let x: Vec<f64> = c
                .clip
                .samples()
                .iter()
                .enumerate()
                .map(|(t, v)| v * (0.5 - 0.5 * libm::cos(2.0 * PI * t as f64 / n)))
                .collect();
            let bin_power = |f: usize| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let w = 2.0 * PI * f as f64 * t as f64 / n;
                    re += v * libm::cos(w);
                    im -= v * libm::sin(w);
                }
                re * re + im * im
            };
            let voice: f64 = (1..split as usize).map(bin_power).sum();
            let cue: f64 = (split as usize..1400).map(bin_power).sum();
            let db = 10.0 * libm::log10(cue / voice);
            assert!((db - CUE_LEVEL_DB).abs() < 1.5, "cue at {db:.2} dB");
        }
    }

    #[test]
    fn spec_validation() {
        assert!(synth_corpus(&SynthCorpusSpec { n_classes: 0, ..small_spec(1) }).is_err());
        assert!(synth_corpus(&SynthCorpusSpec { clip_seconds: 0.0, ..small_spec(1) }).is_err());
        // 20 classes reach ~8.5 kHz, beyond Nyquist at 16 kHz.
        assert!(synth_corpus(&SynthCorpusSpec { n_classes: 20, ..small_spec(1) }).is_err());
    }
}
