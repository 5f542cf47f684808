//! Corpus manifests: one `path<TAB>label<TAB>client_key` line per example.
//! Relative paths resolve against the manifest's directory.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("manifest is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub client_key: String,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| ManifestError::Malformed { line: i + 1, reason: reason.into() };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(malformed("expected 3 tab-separated columns"));
        }
        let label = cols[1].trim().parse().map_err(|_| malformed("label is not a non-negative integer"))?;
        let key = cols[2].trim();
        if key.is_empty() || cols[0].is_empty() {
            return Err(malformed("empty path or client key"));
        }
        let path = Path::new(cols[0]);
        let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
        out.push(ManifestEntry { path, label, client_key: key.into() });
    }
    if out.is_empty() {
        return Err(ManifestError::Empty);
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, ManifestError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&fs::read_to_string(path)?, base)
}

/// Writes entries; paths inside `base` are stored relative to it.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> io::Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::new();
    for e in entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        text.push_str(&format!("{}\t{}\t{}\n", p.display(), e.label, e.client_key));
    }
    fs::write(path, text)
}
