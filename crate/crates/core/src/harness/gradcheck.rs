use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic, Example, SyntheticCorpusConfig};
use crate::encoders::{EncoderConfig, OmakeModel};
use crate::error::Result;
use crate::losses::{total_loss, LossConfig, OntologyWeights};
use crate::numerics::Graph;
use crate::ontology::OntologyTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    pub tolerance: f64,
    /// Test hook: perturbs one analytic gradient entry before comparing.
    pub corrupt_gradient: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::full(),
            encoder: EncoderConfig {
                embed_dim: 8,
                patch_grid: 4,
                image_side: 8,
                vision_layers: 1,
                text_layers: 1,
                vocab_size: 64,
                context_length: 32,
            },
            seed: 7,
            step: 1e-5,
            floor: 1e-6,
            tolerance: 1e-4,
            corrupt_gradient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub loss: f64,
    pub passed: bool,
}

/// Four samples from a depth-3 toy tree, three sub-captions each.
fn toy_batch(cfg: &GradcheckConfig) -> Result<(OntologyTree, Vec<Example>)> {
    let synth = SyntheticCorpusConfig {
        depth: 3,
        branching: vec![2, 2],
        samples_per_leaf: 1,
        image_side: cfg.encoder.image_side,
        patch_grid: cfg.encoder.patch_grid,
        caption_noise: 0.0,
        image_noise: 0.1,
        seed: cfg.seed,
    };
    let corpus = generate_synthetic(&synth)?;
    let examples = corpus
        .samples
        .into_iter()
        .map(|mut s| {
            s.sub_captions.truncate(3);
            let image = s.load_image(None)?;
            Ok(Example { sample: s, image })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((corpus.tree, examples))
}

fn loss_at(model: &OmakeModel, examples: &[Example], tree: &OntologyTree, loss: &LossConfig, w: &[OntologyWeights]) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let items: Vec<_> = examples.iter().map(|e| (&e.sample, &e.image)).collect();
    let vars = model.encode_batch_graph(&mut g, &b, &items)?;
    let labels: Vec<&str> = examples.iter().map(|e| e.sample.disease_label.as_str()).collect();
    Ok(total_loss(&mut g, &vars, &labels, Some(tree), loss, Some(w.to_vec()))?.breakdown.total)
}

/// Compares analytic gradients of the total loss with central differences for
/// every parameter value. Sub-caption weights are held at their base values.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (tree, examples) = toy_batch(cfg)?;
    let model = OmakeModel::new(cfg.encoder.clone(), cfg.seed)?;

    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let items: Vec<_> = examples.iter().map(|e| (&e.sample, &e.image)).collect();
    let vars = model.encode_batch_graph(&mut g, &bound, &items)?;
    let labels: Vec<&str> = examples.iter().map(|e| e.sample.disease_label.as_str()).collect();
    let out = total_loss(&mut g, &vars, &labels, Some(&tree), &cfg.loss, None)?;
    let grads = g.backward(out.loss)?;
    let mut analytic: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .enumerate()
        .map(|(p, &v)| grads.get(v).map_or_else(|| vec![0.0; model.params().tensor(p).numel()], <[f64]>::to_vec))
        .collect();
    if cfg.corrupt_gradient {
        let a = &mut analytic[0][0];
        *a += 0.5 * a.abs() + 1e-2;
    }

    let coords: Vec<(usize, usize)> =
        (0..model.params().len()).flat_map(|p| (0..model.params().tensor(p).numel()).map(move |k| (p, k))).collect();
    let errors = coords
        .par_iter()
        .map(|&(p, k)| {
            let probe = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().tensor_mut(p).data_mut()[k] += delta;
                loss_at(&m, &examples, &tree, &cfg.loss, &out.weights)
            };
            let numeric = (probe(cfg.step)? - probe(-cfg.step)?) / (2.0 * cfg.step);
            let a = analytic[p][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            Ok((rel, p, k, a, numeric))
        })
        .collect::<Result<Vec<_>>>()?;
    let (max_rel, p, k, a, n) = errors
        .iter()
        .copied()
        .fold((0.0, 0, 0, 0.0, 0.0), |best, e| if e.0 > best.0 { e } else { best });
    let worst_parameter = model.params().iter().nth(p).map(|(n, _)| n.to_owned()).unwrap_or_default();
    Ok(GradcheckReport {
        checked: coords.len(),
        max_rel_error: max_rel,
        worst_parameter,
        worst_index: k,
        analytic: a,
        numeric: n,
        loss: out.breakdown.total,
        passed: max_rel < cfg.tolerance,
    })
}
