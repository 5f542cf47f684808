//! Parameter checkpoints: `tensor=<name> shape=<d0xd1x...> offset=<n>` lines,
//! then the flat values one per line.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use fedaudio_core::model::{ParamVector, TensorSpec};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{0}")]
    Layout(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn render_checkpoint(p: &ParamVector) -> String {
    let mut out = String::new();
    for t in p.layout() {
        let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        writeln!(out, "tensor={} shape={} offset={}", t.name, shape.join("x"), t.offset).expect("String write");
    }
    for v in p.values() {
        writeln!(out, "{v}").expect("String write");
    }
    out
}

pub fn parse_checkpoint(text: &str) -> Result<ParamVector, CheckpointError> {
    let mut layout = Vec::new();
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let malformed = |reason: &str| CheckpointError::Malformed { line: i + 1, reason: reason.into() };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor=") {
            if !values.is_empty() {
                return Err(malformed("tensor header after values"));
            }
            let mut parts = rest.split(' ');
            let name = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| malformed("missing name"))?;
            let shape = parts
                .next()
                .and_then(|s| s.strip_prefix("shape="))
                .ok_or_else(|| malformed("missing shape="))?
                .split('x')
                .map(str::parse)
                .collect::<Result<Vec<usize>, _>>()
                .map_err(|_| malformed("bad shape"))?;
            let offset = parts
                .next()
                .and_then(|s| s.strip_prefix("offset="))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| malformed("missing offset="))?;
            layout.push(TensorSpec { name: name.into(), shape, offset });
        } else {
            values.push(line.parse::<f64>().map_err(|_| malformed("bad value"))?);
        }
    }
    ParamVector::new(layout, values).map_err(|e| CheckpointError::Layout(e.to_string()))
}

pub fn write_checkpoint(path: impl AsRef<Path>, p: &ParamVector) -> io::Result<()> {
    fs::write(path, render_checkpoint(p))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamVector, CheckpointError> {
    parse_checkpoint(&fs::read_to_string(path)?)
}
