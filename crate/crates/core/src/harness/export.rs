use std::fs;
use std::path::Path;

use serde::Serialize;

use super::eval::embed_images;
use crate::corpus::Example;
use crate::encoders::OmakeModel;
use crate::error::{Error, Result};

#[derive(Serialize)]
struct Line<'a> {
    id: &'a str,
    label: &'a str,
    visual: &'a [f64],
}

/// Writes `{"id","label","visual"}` per example.
pub fn export_embeddings(model: &OmakeModel, examples: &[Example], out: &Path) -> Result<()> {
    let visuals = embed_images(model, examples)?;
    let mut buf = Vec::new();
    for (e, v) in examples.iter().zip(&visuals) {
        serde_json::to_writer(&mut buf, &Line { id: &e.sample.id, label: &e.sample.disease_label, visual: v })?;
        buf.push(b'\n');
    }
    fs::write(out, buf).map_err(|e| Error::io(out, e))
}
