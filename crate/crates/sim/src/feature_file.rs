//! One-example feature files: a `frames=<n> dims=<d> label=<int> client=<key>`
//! header line followed by `n*d` whitespace-separated reals, row-major.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use fedaudio_core::FeatureMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureFileError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("expected {expected} values, found {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("label {label} is outside the {n_classes} known classes")]
    UnknownLabel { label: usize, n_classes: usize },
    #[error("bad value {0:?}")]
    BadValue(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub features: FeatureMatrix,
    pub label: usize,
    pub client: String,
}

fn header_field<'a>(token: Option<&'a str>, key: &str) -> Result<&'a str, FeatureFileError> {
    token
        .and_then(|t| t.strip_prefix(key))
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| FeatureFileError::MalformedHeader(format!("expected {key}=")))
}

fn header_count(token: Option<&str>, key: &str) -> Result<usize, FeatureFileError> {
    let v = header_field(token, key)?;
    v.parse().map_err(|_| FeatureFileError::MalformedHeader(format!("{key}={v} is not a count")))
}

/// Parses file contents. With `n_classes`, labels at or above it are rejected.
pub fn parse_feature_file(text: &str, n_classes: Option<usize>) -> Result<FeatureRecord, FeatureFileError> {
    let (header, body) = text.split_once('\n').unwrap_or((text, ""));
    let mut tokens = header.trim_end_matches('\r').splitn(4, ' ');
    let frames = header_count(tokens.next(), "frames")?;
    let dims = header_count(tokens.next(), "dims")?;
    let label = header_count(tokens.next(), "label")?;
    let client = header_field(tokens.next(), "client")?.trim();
    if client.is_empty() {
        return Err(FeatureFileError::MalformedHeader("empty client key".into()));
    }
    if let Some(k) = n_classes {
        if label >= k {
            return Err(FeatureFileError::UnknownLabel { label, n_classes: k });
        }
    }
    let values = body
        .split_ascii_whitespace()
        .map(|v| v.parse::<f64>().map_err(|_| FeatureFileError::BadValue(v.into())))
        .collect::<Result<Vec<_>, _>>()?;
    let expected =
        frames.checked_mul(dims).ok_or_else(|| FeatureFileError::MalformedHeader("frames*dims overflows".into()))?;
    if values.len() != expected {
        return Err(FeatureFileError::DimensionMismatch { expected, actual: values.len() });
    }
    let features = FeatureMatrix::new(frames, dims, values).map_err(|e| FeatureFileError::BadValue(e.to_string()))?;
    Ok(FeatureRecord { features, label, client: client.into() })
}

pub fn load_feature_file(path: impl AsRef<Path>, n_classes: Option<usize>) -> Result<FeatureRecord, FeatureFileError> {
    parse_feature_file(&fs::read_to_string(path)?, n_classes)
}

/// Values use Rust's shortest round-trip formatting, so reading back is exact.
pub fn render_feature_file(features: &FeatureMatrix, label: usize, client: &str) -> String {
    let mut out = format!("frames={} dims={} label={label} client={client}\n", features.frames(), features.dims());
    for f in 0..features.frames() {
        let row = features.row(f);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn write_feature_file(
    path: impl AsRef<Path>,
    features: &FeatureMatrix,
    label: usize,
    client: &str,
) -> Result<(), FeatureFileError> {
    if client.trim().is_empty() || client.contains('\n') {
        return Err(FeatureFileError::MalformedHeader("client key must be a non-empty single line".into()));
    }
    fs::write(path, render_feature_file(features, label, client))?;
    Ok(())
}
