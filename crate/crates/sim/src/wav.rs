//! 16-bit PCM mono WAV input/output.

use std::fs;
use std::io::{self, Cursor};
use std::path::Path;

use fedaudio_core::AudioClip;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("not a RIFF/WAVE file")]
    NotWav,
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("file is truncated")]
    TruncatedFile,
    #[error("malformed WAV: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

const SCALE: f64 = 32768.0;

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip, WavError> {
    read_wav_bytes(&fs::read(path)?)
}

fn map_hound(e: hound::Error) -> WavError {
    match e {
        hound::Error::IoError(io) if io.kind() == io::ErrorKind::UnexpectedEof => WavError::TruncatedFile,
        // hound reports short reads as a custom error.
        hound::Error::IoError(io) if io.to_string().contains("read enough bytes") => WavError::TruncatedFile,
        hound::Error::IoError(io) => WavError::Io(io),
        hound::Error::UnfinishedSample => WavError::TruncatedFile,
        hound::Error::Unsupported => WavError::UnsupportedEncoding("unsupported format tag".into()),
        hound::Error::TooWide => WavError::UnsupportedEncoding("sample width".into()),
        hound::Error::InvalidSampleFormat => WavError::UnsupportedEncoding("sample format".into()),
        hound::Error::FormatError(msg) => WavError::Malformed(msg.into()),
    }
}

/// Parses an in-memory WAV file. Samples are `i16 / 32768`.
pub fn read_wav_bytes(bytes: &[u8]) -> Result<AudioClip, WavError> {
    if bytes.len() < 12 {
        return Err(if b"RIFF".starts_with(&bytes[..bytes.len().min(4)]) && !bytes.is_empty() {
            WavError::TruncatedFile
        } else {
            WavError::NotWav
        });
    }
    if &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::NotWav);
    }
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(WavError::UnsupportedEncoding("IEEE float samples".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(WavError::UnsupportedEncoding(format!("{}-bit samples", spec.bits_per_sample)));
    }
    if spec.channels != 1 {
        return Err(WavError::UnsupportedEncoding(format!("{} channels", spec.channels)));
    }
    if spec.sample_rate == 0 {
        return Err(WavError::Malformed("sample rate is zero".into()));
    }
    let declared = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / SCALE).map_err(map_hound))
        .collect::<Result<Vec<_>, _>>()?;
    if samples.len() < declared {
        return Err(WavError::TruncatedFile);
    }
    AudioClip::new(samples, spec.sample_rate).map_err(|e| WavError::Malformed(e.to_string()))
}

/// Quantizes to 16-bit PCM, saturating values outside `[-1, 32767/32768]`.
pub fn quantize(sample: f64) -> i16 {
    (sample * SCALE).round().clamp(-SCALE, SCALE - 1.0) as i16
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), WavError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in clip.samples() {
        w.write_sample(quantize(s)).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)
}

/// Same as [`write_wav`] but into memory.
pub fn wav_bytes(clip: &AudioClip) -> Result<Vec<u8>, WavError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(map_hound)?;
        for &s in clip.samples() {
            w.write_sample(quantize(s)).map_err(map_hound)?;
        }
        w.finalize().map_err(map_hound)?;
    }
    Ok(buf.into_inner())
}
