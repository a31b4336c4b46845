use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticCorpusConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, Reduction};
use crate::numerics::OptimizerConfig;

pub const SEED_ENV: &str = "OMAKE_SEED";
pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of {class}, {path}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic(SyntheticCorpusConfig),
    Jsonl {
        path: PathBuf,
        /// Ontology TSV; needed for soft labels and `{path}` prompts.
        #[serde(default)]
        ontology: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSource,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of each class held out for evaluation.
    pub eval_fraction: f64,
    /// Classes with at most this many eval samples count as tail classes.
    pub tail_threshold: usize,
    /// `{class}` and `{path}` are substituted.
    pub prompt_template: String,
    pub retrieval_ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSource::Synthetic(SyntheticCorpusConfig::default()),
            encoder: EncoderConfig::default(),
            loss: LossConfig { fga_reduction: Reduction::Mean, ..LossConfig::full() },
            optimizer: OptimizerConfig::desk_scale(),
            epochs: 5,
            batch_size: 32,
            seed: 42,
            eval_fraction: 0.2,
            tail_threshold: 15,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_owned(),
            retrieval_ks: vec![10, 50, 100],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Applies `OMAKE_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::param("batch_size", "contrastive terms need at least 2 samples per batch"));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::param("eval_fraction", format!("must lie in [0, 1), got {}", self.eval_fraction)));
        }
        if !(self.optimizer.lr > 0.0) || !(self.optimizer.weight_decay >= 0.0) {
            return Err(Error::param("optimizer", "lr must be positive and weight decay non-negative"));
        }
        if !self.prompt_template.contains("{class}") {
            return Err(Error::Config("prompt template must contain `{class}`".into()));
        }
        if self.retrieval_ks.contains(&0) {
            return Err(Error::param("retrieval_ks", "k must be at least 1"));
        }
        if let CorpusSource::Synthetic(s) = &self.corpus {
            s.validate()?;
            if s.image_side != self.encoder.image_side || s.patch_grid != self.encoder.patch_grid {
                return Err(Error::Config(format!(
                    "synthetic images are {}px on a {} grid but the encoder expects {}px on a {} grid",
                    s.image_side, s.patch_grid, self.encoder.image_side, self.encoder.patch_grid
                )));
            }
        }
        Ok(())
    }

    /// Makes corpus paths absolute so the config can be reused from elsewhere.
    pub fn absolutize_paths(&mut self) -> Result<()> {
        if let CorpusSource::Jsonl { path, ontology } = &mut self.corpus {
            *path = fs::canonicalize(&*path).map_err(|e| Error::io(&*path, e))?;
            if let Some(o) = ontology {
                *o = fs::canonicalize(&*o).map_err(|e| Error::io(&*o, e))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"epochs": 1, "learning_rate": 0.1}"#).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("learning_rate")), "{err}");
        let err = RunConfig::from_json(r#"{"loss": {"tau": 0.1, "gamma": 2}}"#).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"epochs": 2, "corpus": {"jsonl": {"path": "a.jsonl"}}}"#).unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.batch_size, 32);
        assert!(matches!(cfg.corpus, CorpusSource::Jsonl { ontology: None, .. }));
    }

    #[test]
    fn invariants_enforced() {
        assert!(RunConfig { batch_size: 1, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { eval_fraction: 1.0, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { prompt_template: "{path}".into(), ..RunConfig::default() }.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.encoder.image_side = 16;
        assert!(cfg.validate().is_err());
    }
}
