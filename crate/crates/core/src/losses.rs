//! The pretraining objective and its components.
//!
//! Each term is callable on its own so ablations can mix them freely:
//!
//! * [`ontology_guided_weights`]: per-sub-caption weights, max-normalised
//!   similarity to the ontology-caption embedding.
//! * [`alignment_loss`]: cross-entropy between a soft target row and the
//!   temperature softmax of anchor/target similarities.
//! * [`mkia_loss`]: symmetric multi-positive alignment of each image with its
//!   knowledge captions and weighted sub-captions.
//! * [`knowledge_enhanced_embedding`] / [`fga_loss`]: patch pooling by raw
//!   caption relevance, aligned against each sub-caption.
//! * [`total_loss`]: `L_MKIA + λ·L_FGA` under the configured toggles.

use serde::{Deserialize, Serialize};

use crate::encoders::BatchVars;
use crate::error::{Error, Result};
use crate::numerics::{dot, Graph, Tensor, Var};
use crate::ontology::{soft_labels, OntologyTree, PathConvention, SoftLabelMatrix};

/// Scores at or below this leave the sub-caption weights uniform.
pub const WEIGHT_GUARD: f64 = 1e-6;
/// Patch-score sums smaller than this in magnitude fall back to mean pooling.
pub const POOLING_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPooling {
    /// Patch weights `z_n / Σ z`, signs kept.
    #[default]
    Literal,
    /// Patch weights `softmax(z / τ)`.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub tau_s: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Align ontology and concept captions besides the raw caption (M*).
    pub use_knowledge_captions: bool,
    /// Sub-caption alignment terms (M).
    pub use_subcaptions: bool,
    /// Fine-grained patch alignment (F).
    pub use_fga: bool,
    /// Ontology soft labels (O).
    pub use_ontology_softlabels: bool,
    /// Ontology-guided sub-caption weights (W).
    pub use_ontology_weighting: bool,
    /// Zero out negative sub-caption weights, so a sub-caption is never pushed
    /// away from its own image.
    pub nonnegative_weights: bool,
    pub fga_reduction: Reduction,
    pub patch_pooling: PatchPooling,
    pub path_convention: PathConvention,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl LossConfig {
    /// Every component on, τ = τ_s = 0.07, β = 0.05, λ = 0.7.
    pub fn full() -> Self {
        Self {
            tau: 0.07,
            tau_s: 0.07,
            beta: 0.05,
            lambda: 0.7,
            use_knowledge_captions: true,
            use_subcaptions: true,
            use_fga: true,
            use_ontology_softlabels: true,
            use_ontology_weighting: true,
            nonnegative_weights: true,
            fga_reduction: Reduction::Sum,
            patch_pooling: PatchPooling::Literal,
            path_convention: PathConvention::RootCounted,
        }
    }

    /// Plain symmetric InfoNCE on raw captions.
    pub fn baseline() -> Self {
        Self {
            use_knowledge_captions: false,
            use_subcaptions: false,
            use_fga: false,
            use_ontology_softlabels: false,
            use_ontology_weighting: false,
            ..Self::full()
        }
    }

    /// Ablation ladder: `baseline`, `m_star`, `m`, `m_f`, `m_f_o`, `full`.
    pub fn ablation(name: &str) -> Result<Self> {
        let base = Self::baseline();
        Ok(match name {
            "baseline" => base,
            "m_star" => Self { use_knowledge_captions: true, ..base },
            "m" => Self { use_knowledge_captions: true, use_subcaptions: true, ..base },
            "m_f" => Self { use_knowledge_captions: true, use_subcaptions: true, use_fga: true, ..base },
            "m_f_o" => Self { use_ontology_weighting: false, ..Self::full() },
            "full" => Self::full(),
            other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.tau_s > 0.0) {
            return Err(Error::param("tau", "temperatures must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::param("beta", format!("must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::param("lambda", format!("must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn effective_beta(&self) -> f64 {
        if self.use_ontology_softlabels {
            self.beta
        } else {
            0.0
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.use_fga {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Per-sample sub-caption weights.
#[derive(Debug, Clone, PartialEq)]
pub struct OntologyWeights(pub Vec<f64>);

impl OntologyWeights {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0; n])
    }
}

/// `s_j = onto · sub_j`, returned as `s / max(s)`; uniform when `max(s) ≤ 1e-6`.
pub fn ontology_guided_weights(onto: &[f64], subs: &Tensor) -> Result<OntologyWeights> {
    if subs.rows() == 0 || subs.numel() == 0 {
        return Err(Error::Contract("ontology weights need at least one sub-caption".into()));
    }
    if subs.cols() != onto.len() {
        return Err(Error::dim("ontology_guided_weights", format!("onto dim {} vs subs dim {}", onto.len(), subs.cols())));
    }
    let scores: Vec<f64> = (0..subs.rows()).map(|j| dot(onto, subs.row_slice(j))).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > WEIGHT_GUARD) {
        return Ok(OntologyWeights::uniform(scores.len()));
    }
    Ok(OntologyWeights(scores.into_iter().map(|s| s / max).collect()))
}

/// `−Σ_ij targets[i,j] · log softmax_j(anchors_i · candidates_j / τ)`, summed over rows.
fn alignment_rows(g: &mut Graph, anchors: Var, candidates: Var, targets: Tensor, tau: f64) -> Result<Var> {
    let logits = g.matmul_nt(anchors, candidates)?;
    let logp = g.log_softmax_rows(logits, tau)?;
    let t = g.constant(targets);
    let weighted = g.mul(logp, t)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0))
}

/// Soft-label cross-entropy of one anchor `[1, d]` against `B` candidates `[B, d]`.
pub fn alignment_loss(g: &mut Graph, anchor: Var, targets: Var, soft_row: &[f64], tau: f64) -> Result<Var> {
    let b = g.value(targets).rows();
    if b == 0 {
        return Err(Error::Contract("alignment over an empty batch".into()));
    }
    if g.value(anchor).rows() != 1 {
        return Err(Error::dim("alignment_loss", format!("anchor has {} rows", g.value(anchor).rows())));
    }
    if soft_row.len() != b {
        return Err(Error::dim("alignment_loss", format!("soft row of {} for {b} targets", soft_row.len())));
    }
    let total: f64 = soft_row.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("soft row sums to {total}")));
    }
    alignment_rows(g, anchor, targets, Tensor::row(soft_row.to_vec()), tau)
}

/// Graph handles for the two MKIA directions and their average.
#[derive(Debug, Clone, Copy)]
pub struct MkiaTerms {
    pub i2t: Var,
    pub t2i: Var,
    pub total: Var,
}

pub fn mkia_loss(
    g: &mut Graph,
    batch: &BatchVars,
    soft: &SoftLabelMatrix,
    weights: &[OntologyWeights],
    cfg: &LossConfig,
) -> Result<MkiaTerms> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Contract("mkia_loss on an empty batch".into()));
    }
    if soft.size() != b || weights.len() != b {
        return Err(Error::dim("mkia_loss", format!("batch {b}, soft labels {}, weights {}", soft.size(), weights.len())));
    }
    let inv_b = 1.0 / b as f64;
    let mut i2t_terms = Vec::new();
    let mut t2i_terms = Vec::new();

    let mut aspects = vec![batch.raw];
    if cfg.use_knowledge_captions {
        aspects.extend([batch.onto, batch.concept]);
    }
    let all: Vec<usize> = (0..b).collect();
    let i2t_targets = pool_targets(soft, &all, |_| 1.0, false)?;
    let t2i_targets = pool_targets(soft, &all, |_| 1.0, true)?;
    for k in aspects {
        i2t_terms.push(alignment_rows(g, batch.visual, k, i2t_targets.clone(), cfg.tau)?);
        t2i_terms.push(alignment_rows(g, k, batch.visual, t2i_targets.clone(), cfg.tau)?);
    }

    if cfg.use_subcaptions {
        let counts: Vec<usize> = batch.subs.iter().map(|&s| g.value(s).rows()).collect();
        for (i, w) in weights.iter().enumerate() {
            if w.0.len() != counts[i] {
                return Err(Error::dim("mkia_loss", format!("sample {i}: {} weights for {} sub-captions", w.0.len(), counts[i])));
            }
        }
        let max_n = counts.iter().copied().max().unwrap_or(0);
        for j in 0..max_n {
            let members: Vec<usize> = (0..b).filter(|&i| counts[i] > j).collect();
            let i2t_targets = pool_targets(soft, &members, |a| weights[a].0[j], false)?;
            let t2i_targets = pool_targets(soft, &members, |a| weights[a].0[j], true)?;
            let anchors = g.gather_rows(batch.visual, &members)?;
            let rows = members.iter().map(|&i| g.row(batch.subs[i], j)).collect::<Result<Vec<_>>>()?;
            let subs_j = g.concat_rows(&rows)?;
            i2t_terms.push(alignment_rows(g, anchors, subs_j, i2t_targets, cfg.tau)?);
            t2i_terms.push(alignment_rows(g, subs_j, anchors, t2i_targets, cfg.tau)?);
        }
    }

    let i2t = sum_scaled(g, &i2t_terms, inv_b)?;
    let t2i = sum_scaled(g, &t2i_terms, inv_b)?;
    let both = g.add(i2t, t2i)?;
    let total = g.scale(both, 0.5);
    Ok(MkiaTerms { i2t, t2i, total })
}

/// Soft targets restricted to `members`, each row renormalised and scaled by
/// the anchor's weight. Text-anchored rows read the matrix transposed.
fn pool_targets(soft: &SoftLabelMatrix, members: &[usize], weight: impl Fn(usize) -> f64, transposed: bool) -> Result<Tensor> {
    let m = members.len();
    let mut data = Vec::with_capacity(m * m);
    for &a in members {
        let row: Vec<f64> = members
            .iter()
            .map(|&c| if transposed { soft.entries.get(c, a) } else { soft.entries.get(a, c) })
            .collect();
        let norm: f64 = row.iter().sum();
        if !(norm > 0.0) {
            return Err(Error::Contract(format!("soft labels for sample {a} have no mass in the pool")));
        }
        let w = weight(a);
        data.extend(row.into_iter().map(|v| w * v / norm));
    }
    Tensor::matrix(m, m, data)
}

fn sum_scaled(g: &mut Graph, terms: &[Var], scale: f64) -> Result<Var> {
    let stacked = g.concat_rows(terms)?;
    let s = g.sum(stacked);
    Ok(g.scale(s, scale))
}

/// Patch pooling weighted by each patch's score against the raw caption,
/// normalised to unit length.
pub fn knowledge_enhanced_embedding(g: &mut Graph, patches: Var, raw: Var, cfg: &LossConfig) -> Result<Var> {
    let (hw, d) = (g.value(patches).rows(), g.value(patches).cols());
    if hw == 0 {
        return Err(Error::Contract("knowledge pooling over zero patches".into()));
    }
    if g.value(raw).cols() != d || g.value(raw).rows() != 1 {
        return Err(Error::dim("knowledge_enhanced_embedding", format!("raw {:?} vs patches [{hw}, {d}]", g.value(raw).shape())));
    }
    let scores = g.matmul_nt(raw, patches)?;
    let pooled = match cfg.patch_pooling {
        PatchPooling::Literal => {
            let total = g.sum(scores);
            if g.value(total).data()[0].abs() < POOLING_GUARD {
                g.mean_rows(patches)?
            } else {
                let w = g.div_scalar(scores, total)?;
                g.matmul(w, patches)?
            }
        }
        PatchPooling::Softmax => {
            let w = g.softmax_rows(scores, cfg.tau)?;
            g.matmul(w, patches)?
        }
    };
    Ok(g.l2_normalize_rows(pooled))
}

/// Each sub-caption against the batch of knowledge-enhanced visual embeddings.
pub fn fga_loss(g: &mut Graph, batch: &BatchVars, cfg: &LossConfig) -> Result<Var> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Contract("fga_loss on an empty batch".into()));
    }
    let mut enhanced = Vec::with_capacity(b);
    for i in 0..b {
        let raw_i = g.row(batch.raw, i)?;
        enhanced.push(knowledge_enhanced_embedding(g, batch.patches[i], raw_i, cfg)?);
    }
    let enhanced = g.concat_rows(&enhanced)?;
    let subs = g.concat_rows(&batch.subs)?;
    let total_subs = g.value(subs).rows();
    let mut targets = Tensor::zeros(total_subs, b);
    let mut r = 0;
    for (i, &s) in batch.subs.iter().enumerate() {
        for _ in 0..g.value(s).rows() {
            targets.data_mut()[r * b + i] = 1.0;
            r += 1;
        }
    }
    let loss = alignment_rows(g, subs, enhanced, targets, cfg.tau)?;
    Ok(match cfg.fga_reduction {
        Reduction::Sum => loss,
        Reduction::Mean => g.scale(loss, 1.0 / total_subs as f64),
    })
}

/// Scalar values of each term, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mkia_i2t: f64,
    pub mkia_t2i: f64,
    pub fga: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `(i2t + t2i)/2 + λ·fga`, recomputed from the parts.
    pub fn recombined(&self, lambda: f64) -> f64 {
        0.5 * (self.mkia_i2t + self.mkia_t2i) + lambda * self.fga
    }
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Sub-caption weights used, held constant under differentiation.
    pub weights: Vec<OntologyWeights>,
}

/// Sub-caption weights for a batch, read off the current embedding values.
pub fn batch_weights(g: &Graph, batch: &BatchVars, cfg: &LossConfig) -> Result<Vec<OntologyWeights>> {
    (0..batch.len())
        .map(|i| {
            let subs = g.value(batch.subs[i]);
            if cfg.use_ontology_weighting {
                let mut w = ontology_guided_weights(g.value(batch.onto).row_slice(i), subs)?;
                if cfg.nonnegative_weights {
                    w.0.iter_mut().for_each(|x| *x = x.max(0.0));
                }
                Ok(w)
            } else {
                Ok(OntologyWeights::uniform(subs.rows()))
            }
        })
        .collect()
}

/// Soft labels for a batch; exact one-hot when the effective β is 0.
pub fn batch_soft_labels(labels: &[&str], tree: Option<&OntologyTree>, cfg: &LossConfig) -> Result<SoftLabelMatrix> {
    let beta = cfg.effective_beta();
    if beta == 0.0 {
        return Ok(SoftLabelMatrix::one_hot(labels.len()));
    }
    let tree = tree.ok_or_else(|| Error::Config("ontology soft labels need an ontology tree".into()))?;
    let s = tree.batch_similarity(labels, cfg.path_convention)?;
    soft_labels(&s, beta, cfg.tau_s)
}

/// `L_MKIA + λ·L_FGA`. Pass `weights` to pin the sub-caption weights, e.g.
/// when probing the loss with finite differences.
pub fn total_loss(
    g: &mut Graph,
    batch: &BatchVars,
    labels: &[&str],
    tree: Option<&OntologyTree>,
    cfg: &LossConfig,
    weights: Option<Vec<OntologyWeights>>,
) -> Result<TotalLoss> {
    cfg.validate()?;
    if labels.len() != batch.len() {
        return Err(Error::dim("total_loss", format!("{} labels for batch of {}", labels.len(), batch.len())));
    }
    let soft = batch_soft_labels(labels, tree, cfg)?;
    let weights = match weights {
        Some(w) => w,
        None => batch_weights(g, batch, cfg)?,
    };
    let mkia = mkia_loss(g, batch, &soft, &weights, cfg)?;
    let lambda = cfg.effective_lambda();
    let (loss, fga_value) = if cfg.use_fga {
        let fga = fga_loss(g, batch, cfg)?;
        let fga_value = g.value(fga).data()[0];
        let scaled = g.scale(fga, lambda);
        (g.add(mkia.total, scaled)?, fga_value)
    } else {
        (mkia.total, 0.0)
    };
    let breakdown = LossBreakdown {
        mkia_i2t: g.value(mkia.i2t).data()[0],
        mkia_t2i: g.value(mkia.t2i).data()[0],
        fga: fga_value,
        total: g.value(loss).data()[0],
    };
    Ok(TotalLoss { loss, breakdown, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::normalize;

    #[test]
    fn weights_hand_values() {
        let onto = [1.0, 0.0];
        let subs = Tensor::from_rows(&[vec![0.2, 0.5], vec![0.4, -0.3]]).unwrap();
        assert_eq!(ontology_guided_weights(&onto, &subs).unwrap().0, vec![0.5, 1.0]);
        let one = Tensor::from_rows(&[vec![0.3, 0.1]]).unwrap();
        assert_eq!(ontology_guided_weights(&onto, &one).unwrap().0, vec![1.0]);
        let equal = Tensor::from_rows(&[vec![0.3, 0.1], vec![0.3, 0.9]]).unwrap();
        assert_eq!(ontology_guided_weights(&onto, &equal).unwrap().0, vec![1.0, 1.0]);
    }

    #[test]
    fn negative_scores_keep_their_sign() {
        let onto = [1.0, 0.0];
        let subs = Tensor::from_rows(&[vec![-0.2, 0.5], vec![0.4, -0.3]]).unwrap();
        assert_eq!(ontology_guided_weights(&onto, &subs).unwrap().0, vec![-0.5, 1.0]);
    }

    #[test]
    fn batch_weights_clamp_when_asked() {
        let mut g = Graph::new();
        let onto = g.constant(Tensor::row(vec![1.0, 0.0]));
        let subs = g.constant(Tensor::from_rows(&[vec![-0.2, 0.5], vec![0.4, -0.3]]).unwrap());
        let batch = BatchVars { visual: onto, patches: vec![subs], raw: onto, onto, concept: onto, subs: vec![subs] };
        let cfg = LossConfig::full();
        assert_eq!(batch_weights(&g, &batch, &cfg).unwrap()[0].0, vec![0.0, 1.0]);
        let literal = LossConfig { nonnegative_weights: false, ..cfg };
        assert_eq!(batch_weights(&g, &batch, &literal).unwrap()[0].0, vec![-0.5, 1.0]);
        let off = LossConfig { use_ontology_weighting: false, ..LossConfig::full() };
        assert_eq!(batch_weights(&g, &batch, &off).unwrap()[0].0, vec![1.0, 1.0]);
    }

    #[test]
    fn weights_guard_and_contract() {
        let onto = [1.0, 0.0];
        let negative = Tensor::from_rows(&[vec![-0.2, 0.5], vec![-0.4, 0.1]]).unwrap();
        assert_eq!(ontology_guided_weights(&onto, &negative).unwrap().0, vec![1.0, 1.0]);
        let tiny = Tensor::from_rows(&[vec![1e-7, 0.5], vec![0.0, 0.1]]).unwrap();
        assert_eq!(ontology_guided_weights(&onto, &tiny).unwrap().0, vec![1.0, 1.0]);
        assert!(matches!(ontology_guided_weights(&onto, &Tensor::zeros(0, 2)), Err(Error::Contract(_))));
    }

    #[test]
    fn single_candidate_alignment_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(normalize(&[0.3, 0.4])));
        let t = g.constant(Tensor::row(normalize(&[-1.0, 0.2])));
        let l = alignment_loss(&mut g, a, t, &[1.0], 0.07).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn uniform_targets_on_orthogonal_candidates_give_log_b() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![0.0, 0.0, 0.0, 1.0]));
        let t = g.constant(Tensor::matrix(3, 4, vec![1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.]).unwrap());
        let l = alignment_loss(&mut g, a, t, &[1.0 / 3.0; 3], 0.07).unwrap();
        assert!((g.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn alignment_rejects_bad_rows() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![1.0, 0.0]));
        let t = g.constant(Tensor::identity(2));
        assert!(alignment_loss(&mut g, a, t, &[0.5, 0.4], 0.07).is_err());
        assert!(alignment_loss(&mut g, a, t, &[1.0], 0.07).is_err());
        let empty = g.constant(Tensor::zeros(0, 2));
        assert!(matches!(alignment_loss(&mut g, a, empty, &[], 0.07), Err(Error::Contract(_))));
    }

    #[test]
    fn knowledge_pooling_cases() {
        let cfg = LossConfig::full();
        // identical patches -> that patch
        let mut g = Graph::new();
        let v = normalize(&[0.3, -0.2, 0.9]);
        let p = g.constant(Tensor::from_rows(&[v.clone(), v.clone(), v.clone()]).unwrap());
        let raw = g.constant(Tensor::row(normalize(&[0.1, 0.5, 0.2])));
        let e = knowledge_enhanced_embedding(&mut g, p, raw, &cfg).unwrap();
        for (a, b) in g.value(e).data().iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        // raw orthogonal to every patch -> mean patch
        let p1 = [1.0, 0.0, 0.0];
        let p2 = normalize(&[1.0, 1.0, 0.0]);
        let p = g.constant(Tensor::from_rows(&[p1.to_vec(), p2.clone()]).unwrap());
        let raw = g.constant(Tensor::row(vec![0.0, 0.0, 1.0]));
        let e = knowledge_enhanced_embedding(&mut g, p, raw, &cfg).unwrap();
        let mean = normalize(&[(1.0 + p2[0]) / 2.0, p2[1] / 2.0, 0.0]);
        for (a, b) in g.value(e).data().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        // z = [1, 3] -> (p1 + 3 p2) / 4
        let p1 = [1.0, 0.0, 0.0];
        let p2 = [0.0, 3.0, 0.0];
        let p = g.constant(Tensor::from_rows(&[p1.to_vec(), p2.to_vec()]).unwrap());
        let raw = g.constant(Tensor::row(vec![1.0, 1.0, 0.0]));
        let e = knowledge_enhanced_embedding(&mut g, p, raw, &cfg).unwrap();
        let expected = normalize(&[0.25, 9.0 / 4.0, 0.0]);
        for (a, b) in g.value(e).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let none = g.constant(Tensor::zeros(0, 3));
        assert!(knowledge_enhanced_embedding(&mut g, none, raw, &cfg).is_err());
    }

    #[test]
    fn ablation_names() {
        for name in ["baseline", "m_star", "m", "m_f", "m_f_o", "full"] {
            LossConfig::ablation(name).unwrap().validate().unwrap();
        }
        assert!(LossConfig::ablation("nope").is_err());
        let base = LossConfig::baseline();
        assert_eq!(base.effective_beta(), 0.0);
        assert_eq!(base.effective_lambda(), 0.0);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(LossConfig { beta: 1.5, ..LossConfig::full() }.validate().is_err());
        assert!(LossConfig { tau: 0.0, ..LossConfig::full() }.validate().is_err());
        assert!(LossConfig { lambda: -1.0, ..LossConfig::full() }.validate().is_err());
    }

    fn unit_rows(rows: usize, d: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = (0..rows).map(|_| normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())).collect();
        Tensor::from_rows(&data).unwrap()
    }

    fn const_batch(g: &mut Graph, b: usize, d: usize, n: &[usize], seed: u64) -> BatchVars {
        let visual = g.leaf(unit_rows(b, d, seed).with_requires_grad(true));
        let raw = g.leaf(unit_rows(b, d, seed + 1));
        let onto = g.leaf(unit_rows(b, d, seed + 2));
        let concept = g.leaf(unit_rows(b, d, seed + 3));
        let patches = (0..b).map(|i| g.leaf(unit_rows(4, d, seed + 10 + i as u64))).collect();
        let subs = (0..b).map(|i| g.leaf(unit_rows(n[i], d, seed + 100 + i as u64))).collect();
        BatchVars { visual, patches, raw, onto, concept, subs }
    }

    #[test]
    fn baseline_reduces_to_symmetric_infonce() {
        let mut g = Graph::new();
        let batch = const_batch(&mut g, 5, 6, &[2, 1, 3, 2, 1], 7);
        let labels = ["a", "b", "c", "d", "e"];
        let cfg = LossConfig::baseline();
        let out = total_loss(&mut g, &batch, &labels, None, &cfg, None).unwrap();
        let v = g.value(batch.visual).clone();
        let t = g.value(batch.raw).clone();
        let sims = v.matmul(&t.transpose()).unwrap();
        let mut i2t = 0.0;
        let mut t2i = 0.0;
        for i in 0..5 {
            let row: Vec<f64> = (0..5).map(|j| sims.get(i, j) / cfg.tau).collect();
            let col: Vec<f64> = (0..5).map(|j| sims.get(j, i) / cfg.tau).collect();
            let lse = |x: &[f64]| x.iter().map(|v| v.exp()).sum::<f64>().ln();
            i2t += lse(&row) - row[i];
            t2i += lse(&col) - col[i];
        }
        let expected = 0.5 * (i2t + t2i) / 5.0;
        assert!((out.breakdown.total - expected).abs() < 1e-10, "{} vs {expected}", out.breakdown.total);
        assert_eq!(out.breakdown.fga, 0.0);
    }

    #[test]
    fn fga_with_identical_enhanced_embeddings_is_n_log_b() {
        let mut g = Graph::new();
        let d = 4;
        let shared = unit_rows(1, d, 3);
        let b = 3;
        let patches = (0..b).map(|_| g.leaf(Tensor::from_rows(&vec![shared.row_slice(0).to_vec(); 2]).unwrap())).collect();
        let n = [2usize, 1, 3];
        let subs = (0..b).map(|i| g.leaf(unit_rows(n[i], d, 50 + i as u64))).collect();
        let raw = g.leaf(unit_rows(b, d, 9));
        let batch = BatchVars { visual: raw, patches, raw, onto: raw, concept: raw, subs };
        let cfg = LossConfig::full();
        let l = fga_loss(&mut g, &batch, &cfg).unwrap();
        assert!((g.value(l).data()[0] - 6.0 * 3f64.ln()).abs() < 1e-10);
        let mean = fga_loss(&mut g, &batch, &LossConfig { fga_reduction: Reduction::Mean, ..cfg }).unwrap();
        assert!((g.value(mean).data()[0] - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn logit_gradient_is_probability_minus_target() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::row(vec![0.3, -0.1, 0.5, 0.2]).with_requires_grad(true));
        let soft = [0.7, 0.1, 0.1, 0.1];
        let tau = 0.5;
        let logp = g.log_softmax_rows(logits, tau).unwrap();
        let t = g.constant(Tensor::row(soft.to_vec()));
        let m = g.mul(logp, t).unwrap();
        let s = g.sum(m);
        let loss = g.scale(s, -1.0);
        let grads = g.backward(loss).unwrap();
        let p = crate::numerics::softmax_slice(g.value(logits).data(), tau);
        for (k, gk) in grads.get(logits).unwrap().iter().enumerate() {
            assert!((gk - (p[k] - soft[k]) / tau).abs() < 1e-12);
        }
    }

    #[test]
    fn breakdown_recombines_and_matches_finite_differences() {
        let labels = ["a", "b", "c"];
        let tree = OntologyTree::from_edges([("a", "x"), ("b", "x"), ("c", "y"), ("x", "r"), ("y", "r"), ("r", "r")]).unwrap();
        let cfg = LossConfig::full();
        let build = |g: &mut Graph, w: Option<Vec<OntologyWeights>>| {
            let batch = const_batch(g, 3, 5, &[2, 3, 1], 21);
            let out = total_loss(g, &batch, &labels, Some(&tree), &cfg, w).unwrap();
            (batch, out)
        };
        let mut g = Graph::new();
        let (batch, out) = build(&mut g, None);
        assert!((out.breakdown.recombined(cfg.lambda) - out.breakdown.total).abs() < 1e-12);
        let grads = g.backward(out.loss).unwrap();
        let analytic = grads.get(batch.visual).unwrap().to_vec();
        let h = 1e-6;
        for k in 0..analytic.len() {
            let eval = |delta: f64| {
                let mut g2 = Graph::new();
                let b2 = const_batch(&mut g2, 3, 5, &[2, 3, 1], 21);
                let mut v = g2.value(b2.visual).clone();
                v.data_mut()[k] += delta;
                let visual = g2.leaf(v);
                let b2 = BatchVars { visual, ..b2 };
                total_loss(&mut g2, &b2, &labels, Some(&tree), &cfg, Some(out.weights.clone())).unwrap().breakdown.total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((numeric - analytic[k]).abs() < 1e-6 * (1.0 + numeric.abs()), "{k}: {numeric} vs {}", analytic[k]);
        }
    }

    #[test]
    fn doubling_one_weight_adds_its_alignment_term() {
        let tree = OntologyTree::from_edges([("a", "x"), ("b", "x"), ("c", "y"), ("x", "r"), ("y", "r"), ("r", "r")]).unwrap();
        let labels = ["a", "b", "c"];
        let cfg = LossConfig::full();
        let soft = batch_soft_labels(&labels, Some(&tree), &cfg).unwrap();
        let n = [2usize, 3, 1];
        let base_w = vec![
            OntologyWeights(vec![1.0, 0.6]),
            OntologyWeights(vec![0.3, 1.0, 0.8]),
            OntologyWeights(vec![1.0]),
        ];
        let run = |w: &[OntologyWeights]| {
            let mut g = Graph::new();
            let batch = const_batch(&mut g, 3, 5, &n, 33);
            let t = mkia_loss(&mut g, &batch, &soft, w, &cfg).unwrap();
            (g.value(t.i2t).data()[0], g, batch)
        };
        let (before, _, _) = run(&base_w);
        let mut doubled = base_w.clone();
        doubled[0].0[1] *= 2.0;
        let (after, mut g, batch) = run(&doubled);
        // slot 1 pool is samples 0 and 1; anchor 0's renormalised soft row
        let row = [soft.entries.get(0, 0), soft.entries.get(0, 1)];
        let norm = row[0] + row[1];
        let anchor = g.row(batch.visual, 0).unwrap();
        let s0 = g.row(batch.subs[0], 1).unwrap();
        let s1 = g.row(batch.subs[1], 1).unwrap();
        let targets = g.concat_rows(&[s0, s1]).unwrap();
        let term = alignment_loss(&mut g, anchor, targets, &[row[0] / norm, row[1] / norm], cfg.tau).unwrap();
        let term = g.value(term).data()[0];
        assert!(((after - before) - 0.6 * term / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_sample_batch_has_zero_loss() {
        let mut g = Graph::new();
        let batch = const_batch(&mut g, 1, 4, &[3], 5);
        let out = total_loss(&mut g, &batch, &["a"], None, &LossConfig { beta: 0.0, ..LossConfig::full() }, None).unwrap();
        assert_eq!(out.breakdown.total, 0.0);
    }

    #[test]
    fn zero_lambda_leaves_only_mkia() {
        let mut g = Graph::new();
        let batch = const_batch(&mut g, 3, 4, &[1, 2, 2], 8);
        let cfg = LossConfig { lambda: 0.0, beta: 0.0, ..LossConfig::full() };
        let out = total_loss(&mut g, &batch, &["a", "b", "c"], None, &cfg, None).unwrap();
        assert_eq!(out.breakdown.total, 0.5 * (out.breakdown.mkia_i2t + out.breakdown.mkia_t2i));
    }
}
