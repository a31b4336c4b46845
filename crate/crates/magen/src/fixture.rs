//! Ten image-caption pairs with controlled embeddings and scripted agents.
//!
//! Pairs 0-3 score at or above 0.7 and are left alone. Of pairs 4-9 the
//! verifier confirms 4-7 and declines 8 and 9.

use std::collections::HashMap;
use std::path::Path;

use omake_core::corpus::{Example, ImageGrid, ImageSource, Sample, DEFAULT_MAX_SUBCAPTIONS};
use omake_core::numerics::normalize;

use crate::backend::{MockBackend, MockReply, Role};
use crate::card::DiseaseCard;
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::pipeline::Embedder;

pub const DISEASES: [&str; 6] =
    ["acne vulgaris", "atopic dermatitis", "guttate psoriasis", "lichen planus", "nummular eczema", "tinea corporis"];
/// Raw-caption cosines, one per pair.
pub const SCORES: [f64; 10] = [0.92, 0.85, 0.78, 0.71, 0.65, 0.55, 0.45, 0.35, 0.25, 0.15];
pub const VERIFIED: [usize; 4] = [4, 5, 6, 7];
pub const DECLINED: [usize; 2] = [8, 9];
const DIM: usize = 48;

pub fn sample_id(k: usize) -> String {
    format!("fx-{k:02}")
}

fn label(k: usize) -> &'static str {
    DISEASES[k % DISEASES.len()]
}

fn raw_caption(k: usize) -> String {
    format!("Photo {k} from a forum post about a skin problem.")
}

pub fn initial_caption(k: usize) -> String {
    format!("Initial description {k}: lesion suggestive of {}.", label(k))
}

pub fn refined_caption(k: usize) -> String {
    format!("Refined description {k}: findings typical of {}.", label(k))
}

fn unit(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    v[i] = 1.0;
    v
}

/// Embeddings laid out so every registered caption has an exact cosine with its image.
pub struct FixtureEmbedder {
    texts: HashMap<String, Vec<f64>>,
}

impl FixtureEmbedder {
    fn image_vector(k: usize) -> Vec<f64> {
        let mut v = unit(k);
        v[10 + k % DISEASES.len()] = 0.5;
        normalize(&v)
    }

    fn caption_vector(k: usize, c: f64) -> Vec<f64> {
        let v = Self::image_vector(k);
        let s = (1.0 - c * c).sqrt();
        (0..DIM).map(|i| c * v[i] + if i == 30 + k { s } else { 0.0 }).collect()
    }

    pub fn new() -> Self {
        let mut texts = HashMap::new();
        for (j, d) in DISEASES.iter().enumerate() {
            texts.insert(d.to_string(), unit(10 + j));
        }
        for k in 0..SCORES.len() {
            texts.insert(raw_caption(k), Self::caption_vector(k, SCORES[k]));
            texts.insert(initial_caption(k), Self::caption_vector(k, 0.9));
            texts.insert(refined_caption(k), Self::caption_vector(k, 0.95));
        }
        Self { texts }
    }
}

impl Default for FixtureEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl Embedder for FixtureEmbedder {
    fn embed_image(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        let k = (image.pixels()[0] * 10.0).round() as usize;
        if k >= SCORES.len() {
            return Err(Error::Contract(format!("not a fixture image (marker {k})")));
        }
        Ok(Self::image_vector(k))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.texts.get(text).cloned().ok_or_else(|| Error::Contract(format!("fixture has no embedding for `{text}`")))
    }
}

pub fn samples() -> Vec<Sample> {
    (0..SCORES.len())
        .map(|k| {
            let mut s = Sample {
                id: sample_id(k),
                image: ImageSource::Inline(vec![vec![k as f64 / 10.0, 0.0], vec![0.0, 0.0]]),
                raw_caption: raw_caption(k),
                ontology_caption: format!("skin disease > {}", label(k)),
                concept_caption: "red, scaly".into(),
                sub_captions: vec![],
                disease_label: label(k).into(),
            };
            s.ensure_subcaptions(DEFAULT_MAX_SUBCAPTIONS);
            s
        })
        .collect()
}

pub fn examples() -> Result<Vec<Example>> {
    Ok(omake_core::corpus::resolve_images(samples(), None)?)
}

pub fn cards() -> Vec<DiseaseCard> {
    let pos: [&str; 6] = [
        "comedones; inflammatory papules; pustules",
        "ill-defined eczematous plaques; lichenification",
        "small, red, scaly, drop-like spots; sudden onset",
        "purple polygonal flat-topped papules; Wickham striae",
        "coin-shaped eczematous plaques; oozing",
        "annular scaly plaque; active raised border; central clearing",
    ];
    let sites = ["face; chest; back", "flexures; neck", "trunk; proximal limbs", "wrists; shins; oral mucosa", "legs; hands", "trunk; groin"];
    let minset = ["comedones", "flexural distribution; itch", "drop-like scaly papules", "violaceous flat papules", "coin-shaped plaques", "annular plaque with central clearing"];
    let split = |s: &str| s.split(';').map(|p| p.trim().to_owned()).collect::<Vec<_>>();
    (0..DISEASES.len())
        .map(|j| DiseaseCard::new(DISEASES[j].into(), split(pos[j]), split(sites[j]), split(minset[j])).expect("fixture card"))
        .collect()
}

pub fn knowledge_base(dir: &Path) -> Result<KnowledgeBase> {
    let kb = KnowledgeBase::open(dir)?;
    for c in cards() {
        kb.store(&c)?;
    }
    Ok(kb)
}

pub fn pool() -> Vec<String> {
    DISEASES.iter().map(|d| d.to_string()).collect()
}

pub fn captioner() -> MockBackend {
    (0..SCORES.len()).fold(MockBackend::new(), |m, k| m.script(Role::Captioning, sample_id(k), vec![MockReply::Text(initial_caption(k))]))
}

pub fn verifier() -> MockBackend {
    let m = VERIFIED.iter().fold(MockBackend::new(), |m, &k| {
        let reply = format!(
            "```\nVERDICT: verified\nDIAGNOSIS: {}\nCAPTION: {}\nCLAIM: lesion suggestive of {} | supported\n```",
            label(k),
            refined_caption(k),
            label(k)
        );
        m.script(Role::Verification, sample_id(k), vec![MockReply::Text(reply)])
    });
    DECLINED.iter().fold(m, |m, &k| {
        let reply = format!("```\nVERDICT: No definitive diagnosis\nCLAIM: lesion suggestive of {} | unsupported\n```", label(k));
        m.script(Role::Verification, sample_id(k), vec![MockReply::Text(reply)])
    })
}
