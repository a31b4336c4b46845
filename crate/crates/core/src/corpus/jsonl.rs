use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::error::Category;

use super::{Sample, DEFAULT_MAX_SUBCAPTIONS};
use crate::error::{Error, Result};

pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

/// Parses one sample per non-blank line and fills in missing sub-captions.
pub fn parse_jsonl(text: &str) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut sample: Sample = serde_json::from_str(line).map_err(|e| match e.classify() {
            Category::Data => Error::Schema { line: line_no, reason: e.to_string() },
            _ => Error::Parse { line: line_no, reason: e.to_string() },
        })?;
        if sample.raw_caption.trim().is_empty() {
            return Err(Error::Schema { line: line_no, reason: "field `raw_caption` is empty".into() });
        }
        if sample.disease_label.trim().is_empty() {
            return Err(Error::Schema { line: line_no, reason: "field `disease_label` is empty".into() });
        }
        sample.ensure_subcaptions(DEFAULT_MAX_SUBCAPTIONS);
        samples.push(sample);
    }
    Ok(samples)
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
