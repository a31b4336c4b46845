use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use base64::Engine;
use serde::{Deserialize, Serialize};

use omake_core::corpus::{Example, ImageGrid, Sample, DEFAULT_MAX_SUBCAPTIONS};
use omake_core::encoders::OmakeModel;
use omake_core::numerics::cosine;

use crate::backend::{call_with_retry, AgentRequest, Backend, Role};
use crate::card::{parse_card, DiseaseCard};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::verdict::{parse_verdict, Verdict, VerdictStatus};

pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const TOP_K: usize = 5;

/// Image and text encoder used for scoring and candidate ranking.
pub trait Embedder: Sync {
    fn embed_image(&self, image: &ImageGrid) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

impl Embedder for OmakeModel {
    fn embed_image(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        Ok(self.encode_image(image)?.1)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.encode_text(text)?)
    }
}

/// `cosine(image, raw caption)` per example.
pub fn score_pairs(examples: &[Example], embedder: &dyn Embedder) -> Result<Vec<(String, f64)>> {
    examples
        .iter()
        .map(|e| {
            let v = embedder.embed_image(&e.image)?;
            let t = embedder.embed_text(&e.sample.raw_caption)?;
            Ok((e.sample.id.clone(), cosine(&v, &t)))
        })
        .collect()
}

/// The five pool diseases whose names score highest against the image; equal
/// scores go in name order.
pub fn top5_diagnoses(image: &ImageGrid, pool: &[String], embedder: &dyn Embedder) -> Result<Vec<(String, f64)>> {
    if pool.len() < TOP_K {
        return Err(Error::Config(format!("disease pool has {} names, need at least {TOP_K}", pool.len())));
    }
    let v = embedder.embed_image(image)?;
    let mut scored = pool
        .iter()
        .map(|d| Ok((d.clone(), cosine(&v, &embedder.embed_text(d)?))))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(TOP_K);
    Ok(scored)
}

/// Binary PGM of the image, base64-encoded.
pub fn image_payload(image: &ImageGrid) -> String {
    let side = image.side();
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    bytes.extend(image.pixels().iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

const CAPTION_PROMPT: &str = "You are a dermatology captioning assistant. Describe the lesion in the image in two or three \
clinical sentences: colour, morphology, surface and body site. The following candidate diagnoses were ranked by a \
foundation model and may be used as priors: ";

const SUMMARY_PROMPT: &str = "Summarise the disease profile into a Disease Card of 60 to 120 tokens inside a ``` block with \
the lines NAME:, POS: (typical features), SITES: (anatomical locations) and MINSET: (minimal discriminative features). \
Separate phrases with ';'.";

const VERIFY_PROMPT: &str = "You verify a clinical image caption against five Disease Cards.\n\
Step 1: extract the factual claims of the initial caption.\n\
Step 2: cross-reference each claim against the POS, SITES and MINSET of every card and against the image.\n\
Step 3: pick the best-matching disease among the five candidates, or answer \"No definitive diagnosis\" if none fits.\n\
Step 4: synthesise a refined caption using only supported claims.\n\
Reply inside a ``` block with VERDICT:, DIAGNOSIS:, CAPTION: and one 'CLAIM: text | supported|unsupported' line per claim.";

fn names(top5: &[(String, f64)]) -> String {
    top5.iter().map(|(d, _)| d.as_str()).collect::<Vec<_>>().join("; ")
}

/// An initial caption from the captioning agent, and the retries it took.
pub fn caption(
    sample_id: &str,
    image: &ImageGrid,
    top5: &[(String, f64)],
    backend: &dyn Backend,
    retry_budget: usize,
) -> Result<(String, usize)> {
    let request = AgentRequest {
        role_prompt: format!("{}\n{CAPTION_PROMPT}{}.", Role::Captioning.tag(), names(top5)),
        user_text: format!("SAMPLE: {sample_id}\nCANDIDATES: {}", names(top5)),
        image_b64: Some(image_payload(image)),
    };
    let (text, retries) = call_with_retry(backend, &request, retry_budget).map_err(|e| e.for_sample(sample_id))?;
    let text = text.trim().to_owned();
    if text.is_empty() {
        return Err(Error::Contract("captioning agent returned an empty caption".into()).for_sample(sample_id));
    }
    Ok((text, retries))
}

/// Runs the summary agent on a profile, asking once more if the reply does not parse.
pub fn summarize(disease: &str, profile: &str, backend: &dyn Backend, retry_budget: usize) -> Result<DiseaseCard> {
    if profile.trim().is_empty() {
        return Err(Error::Card(format!("empty profile for `{disease}`")));
    }
    let request = AgentRequest {
        role_prompt: format!("{}\n{SUMMARY_PROMPT}", Role::Summary.tag()),
        user_text: format!("DISEASE: {disease}\nPROFILE: {}", profile.split_whitespace().collect::<Vec<_>>().join(" ")),
        image_b64: None,
    };
    let mut last = None;
    for _ in 0..2 {
        let (text, _) = call_with_retry(backend, &request, retry_budget)?;
        match parse_card(&text) {
            Ok(card) => return Ok(card),
            Err(e) => {
                log::warn!("summary for `{disease}` did not parse: {e}");
                last = Some(e);
            }
        }
    }
    Err(last.expect("two attempts"))
}

/// Runs the verification agent; a reply that does not parse is requested once more.
pub fn verify(
    sample_id: &str,
    image: &ImageGrid,
    initial_caption: &str,
    cards: &[DiseaseCard],
    backend: &dyn Backend,
    retry_budget: usize,
) -> Result<(Verdict, usize)> {
    if cards.len() != TOP_K {
        return Err(Error::Contract(format!("verification needs {TOP_K} cards, got {}", cards.len())).for_sample(sample_id));
    }
    let candidates: Vec<String> = cards.iter().map(|c| c.name.clone()).collect();
    let card_text: Vec<String> = cards.iter().enumerate().map(|(i, c)| format!("CARD {}\n{}", i + 1, c.render())).collect();
    let request = AgentRequest {
        role_prompt: format!("{}\n{VERIFY_PROMPT}", Role::Verification.tag()),
        user_text: format!(
            "SAMPLE: {sample_id}\nCANDIDATES: {}\nINITIAL CAPTION: {initial_caption}\n\n{}",
            candidates.join("; "),
            card_text.join("\n\n")
        ),
        image_b64: Some(image_payload(image)),
    };
    let mut retries = 0;
    let mut last = None;
    for attempt in 0..2 {
        let (text, r) = call_with_retry(backend, &request, retry_budget).map_err(|e| e.for_sample(sample_id))?;
        retries += r + attempt;
        match parse_verdict(&text, &candidates) {
            Ok(v) => return Ok((v, retries)),
            Err(e @ Error::Verdict(_)) => last = Some(e),
            Err(e) => return Err(e.for_sample(sample_id)),
        }
    }
    Err(last.expect("two attempts").for_sample(sample_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    InitialRetained,
    Verified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub id: String,
    pub score: f64,
    pub routed: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub initial_caption: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub verdict: Option<Verdict>,
    pub final_caption: String,
    pub provenance: Provenance,
    pub retries: usize,
    /// Error that stopped this sample; the original caption is kept.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failed: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub threshold: f64,
    pub max_inflight: usize,
    pub retry_budget: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, max_inflight: 4, retry_budget: 2 }
    }
}

pub struct Agents<'a> {
    pub captioner: &'a dyn Backend,
    pub verifier: &'a dyn Backend,
}

#[derive(Debug, Clone)]
pub struct AugmentOutput {
    pub records: Vec<AugmentationRecord>,
    /// Input samples with `raw_caption` set to the final caption.
    pub samples: Vec<Sample>,
}

impl AugmentOutput {
    pub fn count(&self, p: Provenance) -> usize {
        self.records.iter().filter(|r| r.provenance == p).count()
    }
}

fn process(
    example: &Example,
    score: f64,
    pool: &[String],
    kb: &KnowledgeBase,
    embedder: &dyn Embedder,
    agents: &Agents<'_>,
    cfg: &AugmentConfig,
) -> AugmentationRecord {
    let id = &example.sample.id;
    let mut record = AugmentationRecord {
        id: id.clone(),
        score,
        routed: score < cfg.threshold,
        initial_caption: None,
        verdict: None,
        final_caption: example.sample.raw_caption.clone(),
        provenance: Provenance::Original,
        retries: 0,
        failed: None,
    };
    if !record.routed {
        return record;
    }
    let run = |record: &mut AugmentationRecord| -> Result<()> {
        let top5 = top5_diagnoses(&example.image, pool, embedder).map_err(|e| e.for_sample(id))?;
        let (initial, r1) = caption(id, &example.image, &top5, agents.captioner, cfg.retry_budget)?;
        record.retries += r1;
        record.initial_caption = Some(initial.clone());
        let cards = top5.iter().map(|(d, _)| kb.retrieve(d)).collect::<Result<Vec<_>>>().map_err(|e| e.for_sample(id))?;
        let (verdict, r2) = verify(id, &example.image, &initial, &cards, agents.verifier, cfg.retry_budget)?;
        record.retries += r2;
        match verdict.status {
            VerdictStatus::Verified => {
                record.final_caption = verdict.refined_caption.clone();
                record.provenance = Provenance::Verified;
            }
            VerdictStatus::NoDefinitiveDiagnosis => {
                record.final_caption = initial;
                record.provenance = Provenance::InitialRetained;
            }
        }
        record.verdict = Some(verdict);
        Ok(())
    };
    if let Err(e) = run(&mut record) {
        log::warn!("{e}; keeping the original caption");
        record.failed = Some(e.to_string());
        record.final_caption = example.sample.raw_caption.clone();
        record.provenance = Provenance::Original;
    }
    if record.retries > 0 {
        log::info!("sample `{id}` needed {} retries", record.retries);
    }
    record
}

/// Routes pairs scoring below the threshold through caption and verification,
/// with at most `max_inflight` samples in flight. Output order follows input.
pub fn augment(
    examples: &[Example],
    pool: &[String],
    kb: &KnowledgeBase,
    embedder: &dyn Embedder,
    agents: &Agents<'_>,
    cfg: &AugmentConfig,
) -> Result<AugmentOutput> {
    if cfg.max_inflight == 0 {
        return Err(Error::Config("max_inflight must be at least 1".into()));
    }
    let scores = score_pairs(examples, embedder)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<AugmentationRecord>>> = Mutex::new(vec![None; examples.len()]);
    std::thread::scope(|scope| {
        for _ in 0..cfg.max_inflight.min(examples.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= examples.len() {
                    break;
                }
                let record = process(&examples[i], scores[i].1, pool, kb, embedder, agents, cfg);
                slots.lock().unwrap()[i] = Some(record);
            });
        }
    });
    let records: Vec<AugmentationRecord> = slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot filled")).collect();
    let samples = examples
        .iter()
        .zip(&records)
        .map(|(e, r)| {
            let mut s = e.sample.clone();
            if r.final_caption != s.raw_caption {
                s.set_raw_caption(r.final_caption.clone(), DEFAULT_MAX_SUBCAPTIONS);
            }
            s
        })
        .collect();
    Ok(AugmentOutput { records, samples })
}

/// Samples as JSONL, one per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    Ok(buf)
}
