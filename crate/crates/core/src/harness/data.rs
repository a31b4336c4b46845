use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{CorpusSource, RunConfig};
use crate::corpus::{generate_synthetic, load_jsonl, resolve_images, validate_labels, Example};
use crate::error::{Error, Result};
use crate::ontology::{normalize_name, OntologyTree};

const SPLIT_STREAM: u64 = 0x5eed_0001;

/// A corpus split into training and evaluation examples.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub tree: Option<OntologyTree>,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    /// Every label in the corpus, sorted.
    pub classes: Vec<String>,
}

pub fn prepare(cfg: &RunConfig) -> Result<PreparedData> {
    let (tree, examples) = match &cfg.corpus {
        CorpusSource::Synthetic(s) => {
            let corpus = generate_synthetic(s)?;
            let examples = resolve_images(corpus.samples, None)?;
            (Some(corpus.tree), examples)
        }
        CorpusSource::Jsonl { path, ontology } => {
            let samples = load_jsonl(path)?;
            let tree = match ontology {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    let tree = OntologyTree::parse(&text)?;
                    validate_labels(&samples, &tree)?;
                    Some(tree)
                }
                None => None,
            };
            (tree, resolve_images(samples, path.parent())?)
        }
    };
    for ex in &examples {
        if ex.image.side() != cfg.encoder.image_side {
            return Err(Error::Config(format!(
                "sample `{}` is {}px but the encoder expects {}px",
                ex.sample.id,
                ex.image.side(),
                cfg.encoder.image_side
            )));
        }
    }
    let (train, eval) = stratified_split(examples, cfg.eval_fraction, cfg.seed);
    let mut classes: Vec<String> = train.iter().chain(&eval).map(|e| normalize_name(&e.sample.disease_label)).collect();
    classes.sort();
    classes.dedup();
    Ok(PreparedData { tree, train, eval, classes })
}

/// Holds out `round(n·fraction)` samples of each class (keeping at least one
/// for training); both halves keep corpus order.
pub fn stratified_split(examples: Vec<Example>, fraction: f64, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_class.entry(normalize_name(&ex.sample.disease_label)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM);
    let mut held = vec![false; examples.len()];
    for idx in by_class.values_mut() {
        let n = idx.len();
        let k = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            held[i] = true;
        }
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (ex, h) in examples.into_iter().zip(held) {
        if h {
            eval.push(ex);
        } else {
            train.push(ex);
        }
    }
    (train, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SyntheticCorpusConfig;

    fn small() -> RunConfig {
        let synth = SyntheticCorpusConfig { samples_per_leaf: 5, ..Default::default() };
        RunConfig { corpus: CorpusSource::Synthetic(synth), ..RunConfig::default() }
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let a = prepare(&small()).unwrap();
        assert_eq!(a.classes.len(), 12);
        assert_eq!(a.eval.len(), 12);
        assert_eq!(a.train.len(), 48);
        let b = prepare(&small()).unwrap();
        let ids = |v: &[Example]| v.iter().map(|e| e.sample.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.eval), ids(&b.eval));
        let c = prepare(&RunConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(ids(&a.eval), ids(&c.eval));
    }

    #[test]
    fn singleton_classes_stay_in_training() {
        let a = prepare(&small()).unwrap();
        let one: Vec<Example> = a.train.into_iter().take(1).collect();
        let (train, eval) = stratified_split(one, 0.9, 1);
        assert_eq!((train.len(), eval.len()), (1, 0));
    }
}
