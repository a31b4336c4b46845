//! Training, evaluation, gradient checking and export.

mod config;
mod data;
mod eval;
mod export;
mod gradcheck;
mod train;

pub use config::{CorpusSource, RunConfig, DEFAULT_PROMPT_TEMPLATE, SEED_ENV};
pub use data::{prepare, stratified_split, PreparedData};
pub use eval::{
    class_prompts, class_structure, classes_of, embed_captions, embed_images, evaluate, retrieval_eval, zero_shot_classify,
    ClassAccuracy, ClassStructure, EvalReport, RetrievalReport, ZeroShotReport,
};
pub use export::export_embeddings;
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
pub use train::{load_run, train, train_model, RunArtifacts, StepRecord, TrainOutcome, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};
