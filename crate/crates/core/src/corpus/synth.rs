//! Seeded generator for hierarchical toy corpora.
//!
//! Every non-root node owns a random block pattern; a leaf's prototype image is
//! mid-grey plus the patterns along its path, with amplitudes halving per
//! level, so siblings share the larger family component. Captions are
//! templated from the path and from attribute phrases drawn per node.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{split_subcaptions, ImageGrid, ImageSource, Sample, DEFAULT_MAX_SUBCAPTIONS};
use crate::error::{Error, Result};
use crate::ontology::OntologyTree;

const ROOT_NAME: &str = "skin disease";
const TOP_AMPLITUDE: f64 = 0.3;

const COLORS: &[&str] = &["red", "brown", "white", "violet", "yellow", "pink", "black", "grey"];
const SHAPES: &[&str] = &["annular", "linear", "round", "irregular", "targetoid", "nummular", "reticular", "dome-shaped"];
const TEXTURES: &[&str] = &["scaly", "smooth", "crusted", "ulcerated", "verrucous", "shiny", "atrophic", "papular"];
const SITES: &[&str] = &["trunk", "scalp", "face", "hands", "legs", "arms", "back", "feet"];
const VAGUE: &[&str] = &[
    "Image shared for a second opinion.",
    "Photo taken at a clinic visit.",
    "Patient asked about this spot.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusConfig {
    /// Tree levels including the root.
    pub depth: usize,
    /// Children per node at each non-leaf level; `depth - 1` entries.
    pub branching: Vec<usize>,
    pub samples_per_leaf: usize,
    pub image_side: usize,
    /// Patches per image side; prototype blocks align with patches.
    pub patch_grid: usize,
    /// Probability that a caption sentence is replaced by an uninformative or wrong one.
    pub caption_noise: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub image_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: vec![3, 4],
            samples_per_leaf: 20,
            image_side: 32,
            patch_grid: 4,
            caption_noise: 0.3,
            image_noise: 0.25,
            seed: 42,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config("synthetic depth must be at least 2".into()));
        }
        if self.branching.len() != self.depth - 1 {
            return Err(Error::Config(format!(
                "depth {} needs {} branching factors, got {}",
                self.depth,
                self.depth - 1,
                self.branching.len()
            )));
        }
        if self.branching.iter().any(|&b| b == 0) || self.samples_per_leaf == 0 || self.image_side == 0 || self.patch_grid == 0 {
            return Err(Error::Config("synthetic counts must all be at least 1".into()));
        }
        if self.image_side % self.patch_grid != 0 {
            return Err(Error::Config(format!("image side {} not divisible by patch grid {}", self.image_side, self.patch_grid)));
        }
        if !(0.0..=1.0).contains(&self.caption_noise) || !(self.image_noise >= 0.0) {
            return Err(Error::Config("noise levels out of range".into()));
        }
        Ok(())
    }

    pub fn leaf_count(&self) -> usize {
        self.branching.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub tree: OntologyTree,
    pub samples: Vec<Sample>,
    /// Noise-free image per leaf, in leaf order.
    pub prototypes: Vec<(String, ImageGrid)>,
}

struct Node {
    name: String,
    parent: usize,
    depth: usize,
    pattern: Vec<f64>,
    color: &'static str,
    shape: &'static str,
    texture: &'static str,
    site: &'static str,
}

pub fn generate_synthetic(config: &SyntheticCorpusConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let blocks = config.patch_grid * 2;
    let block_side = (config.image_side / blocks).max(1);
    let blocks = config.image_side / block_side;

    let mut used_words = BTreeSet::new();
    let mut nodes = vec![Node {
        name: ROOT_NAME.to_owned(),
        parent: 0,
        depth: 1,
        pattern: vec![0.0; blocks * blocks],
        color: COLORS[0],
        shape: SHAPES[0],
        texture: TEXTURES[0],
        site: SITES[0],
    }];
    let mut frontier = vec![0usize];
    for (level, &fanout) in config.branching.iter().enumerate() {
        let depth = level + 2;
        let mut next = Vec::new();
        for &parent in &frontier {
            let mut textures = TEXTURES.to_vec();
            let mut sites = SITES.to_vec();
            textures.shuffle(&mut rng);
            sites.shuffle(&mut rng);
            for k in 0..fanout {
                let word = fresh_word(&mut rng, &mut used_words, depth == 2);
                let name = if depth == 2 {
                    word
                } else {
                    let head = nodes[parent].name.rsplit(' ').next().unwrap_or_default().to_owned();
                    format!("{word} {head}")
                };
                let pattern = (0..blocks * blocks).map(|_| rng.random_range(-1.0..1.0)).collect();
                nodes.push(Node {
                    name,
                    parent,
                    depth,
                    pattern,
                    color: COLORS[rng.random_range(0..COLORS.len())],
                    shape: SHAPES[rng.random_range(0..SHAPES.len())],
                    texture: textures[k % textures.len()],
                    site: sites[k % sites.len()],
                });
                next.push(nodes.len() - 1);
            }
        }
        frontier = next;
    }
    let leaves = frontier;

    let edges: Vec<(&str, &str)> = nodes.iter().map(|n| (n.name.as_str(), nodes[n.parent].name.as_str())).collect();
    let tree = OntologyTree::from_edges(edges)?;

    let ancestry = |leaf: usize| {
        let mut chain = vec![leaf];
        while chain.last().map(|&n| nodes[n].depth) != Some(1) {
            chain.push(nodes[*chain.last().unwrap()].parent);
        }
        chain
    };

    let prototypes: Vec<(String, ImageGrid)> = leaves
        .iter()
        .map(|&leaf| {
            let mut blocks_v = vec![0.5; blocks * blocks];
            for n in ancestry(leaf) {
                let node = &nodes[n];
                if node.depth < 2 {
                    continue;
                }
                let amp = TOP_AMPLITUDE * 0.5f64.powi(node.depth as i32 - 2);
                for (b, p) in blocks_v.iter_mut().zip(&node.pattern) {
                    *b += amp * p;
                }
            }
            let side = config.image_side;
            let pixels = (0..side * side)
                .map(|i| {
                    let (r, c) = (i / side, i % side);
                    let b = ((r / block_side).min(blocks - 1)) * blocks + (c / block_side).min(blocks - 1);
                    blocks_v[b].clamp(0.0, 1.0)
                })
                .collect();
            Ok((nodes[leaf].name.clone(), ImageGrid::new(side, pixels)?))
        })
        .collect::<Result<_>>()?;

    let noise = match config.image_noise {
        sd if sd > 0.0 => Some(Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?),
        _ => None,
    };
    let mut samples = Vec::with_capacity(leaves.len() * config.samples_per_leaf);
    for (li, &leaf) in leaves.iter().enumerate() {
        let node = &nodes[leaf];
        let chain = ancestry(leaf);
        let family = &nodes[chain[chain.len() - 2]];
        let ontology_caption = tree.path_caption(&node.name)?;
        let concept_caption = format!("{}, {}, {}", family.color, family.shape, node.texture);
        for k in 0..config.samples_per_leaf {
            let diagnosis = if rng.random_bool(config.caption_noise) {
                VAGUE[rng.random_range(0..VAGUE.len())].to_owned()
            } else {
                format!("{} is a form of {} within {}.", capitalize(&node.name), family.name, ROOT_NAME)
            };
            let family_sentence = format!("Lesions appear {} and {}.", family.color, family.shape);
            let detail_source = if rng.random_bool(config.caption_noise) {
                &nodes[leaves[rng.random_range(0..leaves.len())]]
            } else {
                node
            };
            let detail_sentence =
                format!("The surface is {}, commonly on the {}.", detail_source.texture, detail_source.site);
            let raw_caption = format!("{diagnosis} {family_sentence} {detail_sentence}");

            let proto = &prototypes[li].1;
            let gain = rng.random_range(0.7..1.3);
            let pixels = proto
                .pixels()
                .iter()
                .map(|p| {
                    let jitter = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
                    (0.5 + (p - 0.5) * gain + jitter).clamp(0.0, 1.0)
                })
                .collect();
            let image = ImageGrid::new(config.image_side, pixels)?;
            samples.push(Sample {
                id: format!("syn-{li:03}-{k:04}"),
                image: ImageSource::Inline(image.to_rows()),
                sub_captions: split_subcaptions(&raw_caption, DEFAULT_MAX_SUBCAPTIONS),
                raw_caption,
                ontology_caption: ontology_caption.clone(),
                concept_caption: concept_caption.clone(),
                disease_label: node.name.clone(),
            });
        }
    }
    Ok(SyntheticCorpus { tree, samples, prototypes })
}

fn fresh_word(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>, family: bool) -> String {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    const SUFFIXES: &[&str] = &["osis", "itis", "oma", "ia", "ema"];
    loop {
        let syllables = if family { 2 } else { 3 };
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
        }
        if family {
            w.push_str(SUFFIXES[rng.random_range(0..SUFFIXES.len())]);
        } else {
            w.push('d');
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticCorpusConfig {
        SyntheticCorpusConfig { samples_per_leaf: 2, ..SyntheticCorpusConfig::default() }
    }

    #[test]
    fn shape_arithmetic() {
        let c = generate_synthetic(&small()).unwrap();
        assert_eq!(c.samples.len(), 24);
        assert_eq!(c.tree.leaves().len(), 12);
        assert_eq!(c.prototypes.len(), 12);
        assert_eq!(c.tree.len(), 1 + 3 + 12);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.tree, b.tree);
        let c = generate_synthetic(&SyntheticCorpusConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn labels_resolve_and_captions_follow_templates() {
        let c = generate_synthetic(&small()).unwrap();
        for s in &c.samples {
            let path = c.tree.path_to_root(&s.disease_label).unwrap();
            assert_eq!(path.len(), 3);
            assert_eq!(s.ontology_caption, path.join(" > "));
            assert_eq!(s.sub_captions.len(), 3);
            let grid = s.load_image(None).unwrap();
            assert_eq!(grid.side(), 32);
            assert!(grid.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn sibling_prototypes_are_closer_than_cousins() {
        let c = generate_synthetic(&small()).unwrap();
        let dist = |a: &ImageGrid, b: &ImageGrid| -> f64 {
            a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let (mut sib, mut cross) = (Vec::new(), Vec::new());
        for (i, (na, a)) in c.prototypes.iter().enumerate() {
            for (nb, b) in &c.prototypes[i + 1..] {
                let same_family = c.tree.parent(na).unwrap() == c.tree.parent(nb).unwrap();
                if same_family { sib.push(dist(a, b)) } else { cross.push(dist(a, b)) }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let max_sib = sib.iter().copied().fold(0.0, f64::max);
        assert!(mean(&sib) < mean(&cross), "{} vs {}", mean(&sib), mean(&cross));
        // measured at seed 42: every sibling pair is closer than the average cousin pair
        assert!(max_sib < mean(&cross), "{max_sib} vs {}", mean(&cross));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_synthetic(&SyntheticCorpusConfig { branching: vec![3], ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticCorpusConfig { samples_per_leaf: 0, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticCorpusConfig { image_side: 30, ..small() }).is_err());
    }
}
