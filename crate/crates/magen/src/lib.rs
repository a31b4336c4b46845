//! Caption augmentation with captioning, summary and verification agents.
//!
//! Image-caption pairs whose encoder similarity falls below a threshold are
//! re-captioned from the image and the top-5 zero-shot candidates, then
//! checked against Disease Cards from a knowledge base. Verified captions
//! replace the original; undecided ones keep the initial description.

pub mod backend;
pub mod card;
pub mod error;
pub mod fixture;
pub mod kb;
pub mod pipeline;
pub mod verdict;

pub use backend::{call_with_retry, AgentRequest, Backend, HttpBackend, MockBackend, MockReply, Role};
pub use card::{parse_card, DiseaseCard};
pub use error::{Error, Result};
pub use kb::KnowledgeBase;
pub use pipeline::{
    augment, caption, score_pairs, summarize, top5_diagnoses, verify, Agents, AugmentConfig, AugmentOutput,
    AugmentationRecord, Embedder, Provenance, DEFAULT_THRESHOLD,
};
pub use verdict::{parse_verdict, ClaimCheck, Verdict, VerdictStatus};
