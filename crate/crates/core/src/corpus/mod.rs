//! Image-caption samples, JSONL ingestion and the synthetic corpus generator.

mod jsonl;
mod split;
mod synth;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use jsonl::{load_jsonl, parse_jsonl, write_jsonl};
pub use split::{split_subcaptions, DEFAULT_MAX_SUBCAPTIONS};
pub use synth::{generate_synthetic, SyntheticCorpusConfig};

use crate::error::{Error, Result};
use crate::ontology::OntologyTree;

/// Where a sample's pixels live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    /// Row-major grayscale grid with values in `[0, 1]`.
    Inline(Vec<Vec<f64>>),
    /// A JSON file holding the same nested array, relative to the corpus file.
    Path(String),
}

/// Square grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    side: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::dim("image", format!("{} pixels for side {side}", pixels.len())));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixel value {bad}")));
        }
        Ok(Self { side, pixels })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let side = rows.len();
        if rows.iter().any(|r| r.len() != side) {
            return Err(Error::dim("image", "grid must be square".to_string()));
        }
        Self::new(side, rows.iter().flatten().copied().collect())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.pixels.chunks(self.side).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub image: ImageSource,
    pub raw_caption: String,
    pub ontology_caption: String,
    pub concept_caption: String,
    #[serde(default)]
    pub sub_captions: Vec<String>,
    pub disease_label: String,
}

impl Sample {
    /// Fills `sub_captions` from the raw caption when absent.
    pub fn ensure_subcaptions(&mut self, n_max: usize) {
        if self.sub_captions.is_empty() {
            self.sub_captions = split_subcaptions(&self.raw_caption, n_max);
        }
    }

    /// Replaces the raw caption and re-derives the sub-captions from it.
    pub fn set_raw_caption(&mut self, caption: String, n_max: usize) {
        self.raw_caption = caption;
        self.sub_captions = split_subcaptions(&self.raw_caption, n_max);
    }

    pub fn load_image(&self, base_dir: Option<&Path>) -> Result<ImageGrid> {
        match &self.image {
            ImageSource::Inline(rows) => ImageGrid::from_rows(rows),
            ImageSource::Path(p) => {
                let path = base_dir.map_or_else(|| Path::new(p).to_path_buf(), |b| b.join(p));
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let rows: Vec<Vec<f64>> = serde_json::from_str(&text)?;
                ImageGrid::from_rows(&rows)
            }
        }
    }
}

/// Checks every label against `tree`.
pub fn validate_labels(samples: &[Sample], tree: &OntologyTree) -> Result<()> {
    for s in samples {
        if !tree.contains(&s.disease_label) {
            return Err(Error::Lookup(format!("{} (sample `{}`)", s.disease_label, s.id)));
        }
    }
    Ok(())
}

/// A sample with its pixels resolved, ready for encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sample: Sample,
    pub image: ImageGrid,
}

pub fn resolve_images(samples: Vec<Sample>, base_dir: Option<&Path>) -> Result<Vec<Example>> {
    samples
        .into_iter()
        .map(|sample| {
            let image = sample.load_image(base_dir)?;
            Ok(Example { sample, image })
        })
        .collect()
}
