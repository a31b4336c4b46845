use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::encoders::OmakeModel;
use crate::error::{Error, Result};
use crate::numerics::{cosine, dot, Tensor};
use crate::ontology::{normalize_name, OntologyTree};

/// Visual embeddings for each example, in input order.
pub fn embed_images(model: &OmakeModel, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    examples.par_iter().map(|e| model.encode_image(&e.image).map(|(_, v)| v)).collect()
}

/// Raw-caption embeddings for each example, in input order.
pub fn embed_captions(model: &OmakeModel, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    examples.par_iter().map(|e| model.encode_text(&e.sample.raw_caption)).collect()
}

/// Fills `{class}` and `{path}` for every class.
pub fn class_prompts(template: &str, classes: &[String], tree: Option<&OntologyTree>) -> Result<BTreeMap<String, String>> {
    classes
        .iter()
        .map(|c| {
            let mut prompt = template.replace("{class}", c);
            if template.contains("{path}") {
                let tree = tree.ok_or_else(|| Error::Config("`{path}` prompts need an ontology".into()))?;
                prompt = prompt.replace("{path}", &tree.path_caption(c)?);
            }
            Ok((normalize_name(c), prompt))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub per_class: BTreeMap<String, ClassAccuracy>,
    pub overall_accuracy: f64,
    /// Mean accuracy over samples of tail classes; absent when there are none.
    pub tail_accuracy: Option<f64>,
    pub tail_classes: Vec<String>,
    /// Predicted class per example, in input order.
    pub predictions: Vec<String>,
}

/// Predicts the prompt with the highest cosine to each image; ties go to the
/// lexicographically first class.
pub fn zero_shot_classify(
    model: &OmakeModel,
    examples: &[Example],
    prompts: &BTreeMap<String, String>,
    tail_threshold: usize,
) -> Result<ZeroShotReport> {
    let visuals = embed_images(model, examples)?;
    let classes: Vec<&String> = prompts.keys().collect();
    let texts: Vec<&str> = prompts.values().map(String::as_str).collect();
    let prompt_emb = if texts.is_empty() { Tensor::zeros(0, 0) } else { model.encode_texts(&texts)? };
    let labels: Vec<String> = examples.iter().map(|e| normalize_name(&e.sample.disease_label)).collect();
    for (label, e) in labels.iter().zip(examples) {
        if !prompts.contains_key(label) {
            return Err(Error::Config(format!("no prompt for class `{label}` (sample `{}`)", e.sample.id)));
        }
    }
    let predictions: Vec<String> = visuals
        .iter()
        .map(|v| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for c in 0..classes.len() {
                let s = cosine(v, prompt_emb.row_slice(c));
                if s > best_score {
                    best = c;
                    best_score = s;
                }
            }
            classes[best].clone()
        })
        .collect();
    Ok(score_predictions(&labels, predictions, tail_threshold))
}

fn score_predictions(labels: &[String], predictions: Vec<String>, tail_threshold: usize) -> ZeroShotReport {
    let mut per_class: BTreeMap<String, ClassAccuracy> = BTreeMap::new();
    for (label, pred) in labels.iter().zip(&predictions) {
        let entry = per_class.entry(label.clone()).or_insert(ClassAccuracy { correct: 0, total: 0, accuracy: 0.0 });
        entry.total += 1;
        entry.correct += usize::from(label == pred);
    }
    for c in per_class.values_mut() {
        c.accuracy = c.correct as f64 / c.total as f64;
    }
    let ratio = |pairs: &mut dyn Iterator<Item = &ClassAccuracy>| {
        let (c, t) = pairs.fold((0, 0), |(c, t), a| (c + a.correct, t + a.total));
        (t > 0).then(|| c as f64 / t as f64)
    };
    let overall_accuracy = ratio(&mut per_class.values()).unwrap_or(0.0);
    let tail_classes: Vec<String> =
        per_class.iter().filter(|(_, a)| a.total <= tail_threshold).map(|(k, _)| k.clone()).collect();
    let tail_accuracy = ratio(&mut tail_classes.iter().map(|k| &per_class[k]));
    ZeroShotReport { per_class, overall_accuracy, tail_accuracy, tail_classes, predictions }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t: BTreeMap<usize, f64>,
    pub t2i: BTreeMap<usize, f64>,
}

/// 0-based rank of `query`'s partner among `scores`: candidates scoring
/// strictly higher, plus equal scores with a smaller id.
fn partner_rank(scores: &[f64], partner: usize, ids: &[&str]) -> usize {
    let s = scores[partner];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && ids[j] < ids[partner]))
        .count()
}

/// Recall@k in both directions between images and their raw captions.
pub fn retrieval_eval(model: &OmakeModel, examples: &[Example], ks: &[usize]) -> Result<RetrievalReport> {
    let n = examples.len();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::param("k", format!("recall@{k} needs 1 <= k <= {n} samples")));
    }
    let visuals = embed_images(model, examples)?;
    let texts = embed_captions(model, examples)?;
    let ids: Vec<&str> = examples.iter().map(|e| e.sample.id.as_str()).collect();
    let ranks = |queries: &[Vec<f64>], candidates: &[Vec<f64>]| -> Vec<usize> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let scores: Vec<f64> = candidates.iter().map(|c| dot(&queries[i], c)).collect();
                partner_rank(&scores, i, &ids)
            })
            .collect()
    };
    let i2t_ranks = ranks(&visuals, &texts);
    let t2i_ranks = ranks(&texts, &visuals);
    let recall = |r: &[usize]| -> BTreeMap<usize, f64> {
        ks.iter().map(|&k| (k, r.iter().filter(|&&x| x < k).count() as f64 / n as f64)).collect()
    };
    Ok(RetrievalReport { i2t: recall(&i2t_ranks), t2i: recall(&t2i_ranks) })
}

/// Mean cosine between class centroids, split by whether two leaves share a parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStructure {
    pub sibling_cosine: f64,
    pub cross_family_cosine: f64,
    pub sibling_pairs: usize,
    pub cross_family_pairs: usize,
}

pub fn class_structure(tree: &OntologyTree, labels: &[String], embeddings: &[Vec<f64>]) -> Result<Option<ClassStructure>> {
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (l, e) in labels.iter().zip(embeddings) {
        let (acc, n) = sums.entry(l.as_str()).or_insert_with(|| (vec![0.0; e.len()], 0));
        for (a, x) in acc.iter_mut().zip(e) {
            *a += x;
        }
        *n += 1;
    }
    let names: Vec<&str> = sums.keys().copied().collect();
    let parents = names.iter().map(|n| tree.parent(n)).collect::<Result<Vec<_>>>()?;
    let grand: Vec<&str> = parents.iter().map(|p| tree.parent(p)).collect::<Result<Vec<_>>>()?;
    let (mut sib, mut sib_n, mut cross, mut cross_n) = (0.0, 0, 0.0, 0);
    for a in 0..names.len() {
        for b in a + 1..names.len() {
            let c = cosine(&sums[names[a]].0, &sums[names[b]].0);
            if parents[a] == parents[b] {
                sib += c;
                sib_n += 1;
            } else if grand[a] == grand[b] {
                cross += c;
                cross_n += 1;
            }
        }
    }
    if sib_n == 0 || cross_n == 0 {
        return Ok(None);
    }
    Ok(Some(ClassStructure {
        sibling_cosine: sib / sib_n as f64,
        cross_family_cosine: cross / cross_n as f64,
        sibling_pairs: sib_n,
        cross_family_pairs: cross_n,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub zero_shot: ZeroShotReport,
    pub retrieval: RetrievalReport,
    pub class_structure: Option<ClassStructure>,
    /// Metrics log of the run that produced the checkpoint.
    pub loss_curve: Option<String>,
}

pub fn evaluate(
    model: &OmakeModel,
    examples: &[Example],
    classes: &[String],
    tree: Option<&OntologyTree>,
    template: &str,
    tail_threshold: usize,
    ks: &[usize],
) -> Result<EvalReport> {
    let prompts = class_prompts(template, classes, tree)?;
    let zero_shot = zero_shot_classify(model, examples, &prompts, tail_threshold)?;
    let retrieval = retrieval_eval(model, examples, ks)?;
    let class_structure = match tree {
        Some(t) => {
            let labels: Vec<String> = examples.iter().map(|e| normalize_name(&e.sample.disease_label)).collect();
            class_structure(t, &labels, &embed_images(model, examples)?)?
        }
        None => None,
    };
    Ok(EvalReport { samples: examples.len(), zero_shot, retrieval, class_structure, loss_curve: None })
}

/// Classes present in `examples`.
pub fn classes_of(examples: &[Example]) -> Vec<String> {
    let set: BTreeSet<String> = examples.iter().map(|e| normalize_name(&e.sample.disease_label)).collect();
    set.into_iter().collect()
}
