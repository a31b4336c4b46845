//! Toy vision and text encoders producing unit-norm embeddings.
//!
//! Vision: non-overlapping patches, linear projection, then pre-norm
//! self-attention/MLP blocks. The global embedding is the normalised mean of
//! the final patch outputs; patch embeddings are the same outputs normalised
//! row-wise.
//!
//! Text: alphanumeric tokens hashed into a fixed vocabulary, truncated to the
//! context length, token plus position embeddings mean-pooled and passed
//! through residual MLP blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageGrid, Sample};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    /// Patches per image side; `HW = patch_grid²`.
    pub patch_grid: usize,
    pub image_side: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub vocab_size: usize,
    pub context_length: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            patch_grid: 4,
            image_side: 32,
            vision_layers: 2,
            text_layers: 2,
            vocab_size: 4096,
            context_length: 77,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.embed_dim, self.patch_grid, self.image_side, self.vocab_size, self.context_length];
        if counts.contains(&0) {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs a null slot plus at least one bucket".into()));
        }
        if self.image_side % self.patch_grid != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch grid {}",
                self.image_side, self.patch_grid
            )));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn patch_side(&self) -> usize {
        self.image_side / self.patch_grid
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Per-sample embeddings; every row is unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub visual: Vec<f64>,
    pub patches: Tensor,
    pub raw: Vec<f64>,
    pub onto: Vec<f64>,
    pub concept: Vec<f64>,
    pub subs: Tensor,
}

/// Embeddings of a batch, as nodes of a graph.
#[derive(Debug, Clone)]
pub struct BatchVars {
    /// `[B, d]`
    pub visual: Var,
    /// One `[HW, d]` per sample.
    pub patches: Vec<Var>,
    pub raw: Var,
    pub onto: Var,
    pub concept: Var,
    /// One `[N_i, d]` per sample.
    pub subs: Vec<Var>,
}

impl BatchVars {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    vision: Vec<(Attention, Mlp)>,
    vision_out: usize,
    token_emb: usize,
    pos_emb: usize,
    text: Vec<Mlp>,
    text_out: usize,
}

/// Parameters bound to a graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone)]
pub struct OmakeModel {
    config: EncoderConfig,
    params: ParamStore,
    layout: Layout,
}

impl OmakeModel {
    /// Randomly initialised model; the seed fully determines the weights.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.embed_dim;
        let hidden = 2 * d;
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            Tensor::matrix(rows, cols, data).expect("init shape")
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let p2 = config.patch_side() * config.patch_side();

        for l in 0..config.vision_layers {
            for (name, r, c, s) in [
                ("attn.wq", d, d, fan(d)),
                ("attn.wk", d, d, fan(d)),
                ("attn.wv", d, d, fan(d)),
                ("attn.wo", d, d, 0.5 * fan(d)),
                ("mlp.w1", d, hidden, fan(d)),
                ("mlp.w2", hidden, d, 0.5 * fan(hidden)),
            ] {
                params.insert(format!("vision.layer{l}.{name}"), normal(r, c, s))?;
            }
            params.insert(format!("vision.layer{l}.mlp.b1"), Tensor::zeros(1, hidden))?;
            params.insert(format!("vision.layer{l}.mlp.b2"), Tensor::zeros(1, d))?;
        }
        params.insert("vision.patch.w", normal(p2, d, fan(p2)))?;
        params.insert("vision.patch.b", normal(1, d, 0.1))?;
        params.insert("vision.out.w", normal(d, d, fan(d)))?;
        params.insert("text.token_emb", normal(config.vocab_size, d, 1.0))?;
        params.insert("text.pos_emb", normal(config.context_length, d, 0.1))?;
        for l in 0..config.text_layers {
            params.insert(format!("text.layer{l}.mlp.w1"), normal(d, hidden, fan(d)))?;
            params.insert(format!("text.layer{l}.mlp.b1"), Tensor::zeros(1, hidden))?;
            params.insert(format!("text.layer{l}.mlp.w2"), normal(hidden, d, 0.5 * fan(hidden)))?;
            params.insert(format!("text.layer{l}.mlp.b2"), Tensor::zeros(1, d))?;
        }
        params.insert("text.out.w", normal(d, d, fan(d)))?;
        Self::from_params(config, params)
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = 2 * d;
        let p2 = config.patch_side() * config.patch_side();
        let find = |name: String, rows: usize, cols: usize| -> Result<usize> {
            let idx = params.index_of(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let t = params.tensor(idx);
            if t.rows() != rows || t.cols() != cols || t.shape().len() != 2 {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected [{rows}, {cols}]",
                    t.shape()
                )));
            }
            Ok(idx)
        };
        let mlp = |prefix: String| -> Result<Mlp> {
            Ok(Mlp {
                w1: find(format!("{prefix}.mlp.w1"), d, hidden)?,
                b1: find(format!("{prefix}.mlp.b1"), 1, hidden)?,
                w2: find(format!("{prefix}.mlp.w2"), hidden, d)?,
                b2: find(format!("{prefix}.mlp.b2"), 1, d)?,
            })
        };
        let vision = (0..config.vision_layers)
            .map(|l| {
                let prefix = format!("vision.layer{l}");
                let attn = Attention {
                    wq: find(format!("{prefix}.attn.wq"), d, d)?,
                    wk: find(format!("{prefix}.attn.wk"), d, d)?,
                    wv: find(format!("{prefix}.attn.wv"), d, d)?,
                    wo: find(format!("{prefix}.attn.wo"), d, d)?,
                };
                Ok((attn, mlp(prefix)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let text = (0..config.text_layers).map(|l| mlp(format!("text.layer{l}"))).collect::<Result<Vec<_>>>()?;
        let layout = Layout {
            patch_w: find("vision.patch.w".into(), p2, d)?,
            patch_b: find("vision.patch.b".into(), 1, d)?,
            vision,
            vision_out: find("vision.out.w".into(), d, d)?,
            token_emb: find("text.token_emb".into(), config.vocab_size, d)?,
            pos_emb: find("text.pos_emb".into(), config.context_length, d)?,
            text,
            text_out: find("text.out.w".into(), d, d)?,
        };
        let expected = 6 + 8 * config.vision_layers + 4 * config.text_layers;
        if params.len() != expected {
            return Err(Error::Checkpoint(format!("{} parameters, expected {expected}", params.len())));
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        Bound { vars: self.params.bind(graph, trainable) }
    }

    /// Token ids for `text`: hashed buckets `1..vocab`, truncated; `[0]` when empty.
    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        let buckets = (self.config.vocab_size - 1) as u64;
        let ids: Vec<usize> = tokenize(text)
            .iter()
            .take(self.config.context_length)
            .map(|t| 1 + (fnv1a(t) % buckets) as usize)
            .collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }

    /// Splits an image into `[HW, patch_side²]` rows, patches in row-major order.
    pub fn patchify(&self, image: &ImageGrid) -> Result<Tensor> {
        let side = image.side();
        let grid = self.config.patch_grid;
        if side % grid != 0 {
            return Err(Error::dim("patchify", format!("image side {side} not divisible by patch grid {grid}")));
        }
        let ps = side / grid;
        if ps != self.config.patch_side() {
            return Err(Error::dim(
                "patchify",
                format!("image side {side} does not match configured side {}", self.config.image_side),
            ));
        }
        let px = image.pixels();
        let mut data = Vec::with_capacity(side * side);
        for pr in 0..grid {
            for pc in 0..grid {
                for r in 0..ps {
                    let row = pr * ps + r;
                    data.extend_from_slice(&px[row * side + pc * ps..row * side + (pc + 1) * ps]);
                }
            }
        }
        Tensor::matrix(grid * grid, ps * ps, data)
    }

    fn mlp(&self, g: &mut Graph, b: &Bound, x: Var, mlp: Mlp) -> Result<Var> {
        let h = g.rms_norm_rows(x);
        let h = g.matmul(h, b.vars[mlp.w1])?;
        let h = g.add_row(h, b.vars[mlp.b1])?;
        let h = g.tanh(h);
        let h = g.matmul(h, b.vars[mlp.w2])?;
        let h = g.add_row(h, b.vars[mlp.b2])?;
        g.add(x, h)
    }

    /// Returns `(patches [HW, d], visual [1, d])`, both row-normalised.
    pub fn encode_image_graph(&self, g: &mut Graph, b: &Bound, image: &ImageGrid) -> Result<(Var, Var)> {
        let patches = g.constant(self.patchify(image)?);
        let x = g.matmul(patches, b.vars[self.layout.patch_w])?;
        let mut x = g.add_row(x, b.vars[self.layout.patch_b])?;
        let scale = (self.config.embed_dim as f64).sqrt();
        for &(attn, mlp) in &self.layout.vision {
            let h = g.rms_norm_rows(x);
            let q = g.matmul(h, b.vars[attn.wq])?;
            let k = g.matmul(h, b.vars[attn.wk])?;
            let v = g.matmul(h, b.vars[attn.wv])?;
            let scores = g.matmul_nt(q, k)?;
            let weights = g.softmax_rows(scores, scale)?;
            let mixed = g.matmul(weights, v)?;
            let out = g.matmul(mixed, b.vars[attn.wo])?;
            x = g.add(x, out)?;
            x = self.mlp(g, b, x, mlp)?;
        }
        let h = g.rms_norm_rows(x);
        let out = g.matmul(h, b.vars[self.layout.vision_out])?;
        let pooled = g.mean_rows(out)?;
        let visual = g.l2_normalize_rows(pooled);
        let patches = g.l2_normalize_rows(out);
        Ok((patches, visual))
    }

    /// Encodes texts into a `[n, d]` matrix of unit rows.
    pub fn encode_texts_graph(&self, g: &mut Graph, b: &Bound, texts: &[&str]) -> Result<Var> {
        if texts.is_empty() {
            return Err(Error::Contract("encode_texts_graph with no texts".into()));
        }
        let mut pooled = Vec::with_capacity(texts.len());
        for text in texts {
            let ids = self.token_ids(text);
            let positions: Vec<usize> = (0..ids.len()).collect();
            let tok = g.gather_rows(b.vars[self.layout.token_emb], &ids)?;
            let pos = g.gather_rows(b.vars[self.layout.pos_emb], &positions)?;
            let x = g.add(tok, pos)?;
            pooled.push(g.mean_rows(x)?);
        }
        let mut x = g.concat_rows(&pooled)?;
        for &mlp in &self.layout.text {
            x = self.mlp(g, b, x, mlp)?;
        }
        let h = g.rms_norm_rows(x);
        let out = g.matmul(h, b.vars[self.layout.text_out])?;
        Ok(g.l2_normalize_rows(out))
    }

    /// Encodes a batch of examples with `3 + N_i` texts each.
    pub fn encode_batch_graph(&self, g: &mut Graph, b: &Bound, items: &[(&Sample, &ImageGrid)]) -> Result<BatchVars> {
        if items.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut patches = Vec::with_capacity(items.len());
        let mut visuals = Vec::with_capacity(items.len());
        for (_, image) in items {
            let (p, v) = self.encode_image_graph(g, b, image)?;
            patches.push(p);
            visuals.push(v);
        }
        let visual = g.concat_rows(&visuals)?;

        let bsz = items.len();
        let mut texts: Vec<&str> = Vec::new();
        texts.extend(items.iter().map(|(s, _)| s.raw_caption.as_str()));
        texts.extend(items.iter().map(|(s, _)| s.ontology_caption.as_str()));
        texts.extend(items.iter().map(|(s, _)| s.concept_caption.as_str()));
        let mut sub_ranges = Vec::with_capacity(bsz);
        for (s, _) in items {
            let start = texts.len();
            if s.sub_captions.is_empty() {
                texts.push(s.raw_caption.as_str());
            } else {
                texts.extend(s.sub_captions.iter().map(String::as_str));
            }
            sub_ranges.push(start..texts.len());
        }
        let all = self.encode_texts_graph(g, b, &texts)?;
        let rows = |g: &mut Graph, r: std::ops::Range<usize>| g.gather_rows(all, &r.collect::<Vec<_>>());
        let raw = rows(g, 0..bsz)?;
        let onto = rows(g, bsz..2 * bsz)?;
        let concept = rows(g, 2 * bsz..3 * bsz)?;
        let subs = sub_ranges.into_iter().map(|r| rows(g, r)).collect::<Result<Vec<_>>>()?;
        Ok(BatchVars { visual, patches, raw, onto, concept, subs })
    }

    /// Frozen image encoding: `(patches [HW, d], visual)`.
    pub fn encode_image(&self, image: &ImageGrid) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let (p, v) = self.encode_image_graph(&mut g, &b, image)?;
        Ok((g.value(p).clone(), g.value(v).data().to_vec()))
    }

    pub fn encode_texts(&self, texts: &[&str]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = self.encode_texts_graph(&mut g, &b, texts)?;
        Ok(g.value(out).clone())
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.encode_texts(&[text])?.into_data())
    }

    pub fn encode_bundle(&self, sample: &Sample, image: &ImageGrid) -> Result<EmbeddingBundle> {
        let (patches, visual) = self.encode_image(image)?;
        let mut texts = vec![sample.raw_caption.as_str(), &sample.ontology_caption, &sample.concept_caption];
        if sample.sub_captions.is_empty() {
            texts.push(&sample.raw_caption);
        } else {
            texts.extend(sample.sub_captions.iter().map(String::as_str));
        }
        let t = self.encode_texts(&texts)?;
        let d = self.config.embed_dim;
        let subs = Tensor::matrix(t.rows() - 3, d, t.data()[3 * d..].to_vec())?;
        Ok(EmbeddingBundle {
            visual,
            patches,
            raw: t.row_slice(0).to_vec(),
            onto: t.row_slice(1).to_vec(),
            concept: t.row_slice(2).to_vec(),
            subs,
        })
    }
}
