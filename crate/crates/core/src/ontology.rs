//! Disease taxonomy, path similarity and ontology-aware soft labels.
//!
//! The on-disk format is a UTF-8 TSV with one `child<TAB>parent` edge per
//! line. The root is declared as `root<TAB>root`, and lines starting with `#`
//! are comments.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_slice, Tensor};

/// Lookup key for disease names: trimmed, inner whitespace collapsed, lowercased.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OntologyTree {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    parent: Vec<usize>,
    depth: Vec<usize>,
    root: usize,
}

/// Which nodes count towards path lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathConvention {
    /// Paths count nodes and the root is a shared ancestor of every pair.
    #[default]
    RootCounted,
    /// The root is dropped from every path, which is the same as counting edges.
    RootExcluded,
}

impl OntologyTree {
    /// Builds a tree from `(child, parent)` edges; a self-edge marks the root.
    pub fn from_edges<'a>(edges: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let text: String = edges.into_iter().map(|(c, p)| format!("{c}\t{p}\n")).collect();
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        // (child id, parent key, line number)
        let mut edges: Vec<(usize, String, usize)> = Vec::new();
        let mut root: Option<(usize, usize)> = None;

        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(child), Some(parent), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Parse { line: line_no, reason: "expected `child<TAB>parent`".into() });
            };
            let (child_key, parent_key) = (normalize_name(child), normalize_name(parent));
            if child_key.is_empty() || parent_key.is_empty() {
                return Err(Error::Parse { line: line_no, reason: "empty disease name".into() });
            }
            if let Some(&id) = index.get(&child_key) {
                let (_, prev_parent, prev_line) = edges.iter().find(|(c, _, _)| *c == id).expect("edge per node");
                if *prev_parent != parent_key {
                    return Err(Error::Parse {
                        line: line_no,
                        reason: format!(
                            "`{}` already has parent `{prev_parent}` (line {prev_line}), got `{parent_key}`",
                            names[id]
                        ),
                    });
                }
                continue;
            }
            let id = names.len();
            names.push(child.split_whitespace().collect::<Vec<_>>().join(" "));
            index.insert(child_key.clone(), id);
            if child_key == parent_key {
                if let Some((_, first)) = root {
                    return Err(Error::Parse { line: line_no, reason: format!("second root (first declared on line {first})") });
                }
                root = Some((id, line_no));
            }
            edges.push((id, parent_key, line_no));
        }

        let Some((root, _)) = root else {
            return Err(Error::Parse { line: 0, reason: "no root declared (`name<TAB>name`)".into() });
        };
        let mut parent = vec![usize::MAX; names.len()];
        let mut line_of = vec![0; names.len()];
        for (child, parent_key, line) in &edges {
            line_of[*child] = *line;
            match index.get(parent_key) {
                Some(&p) => parent[*child] = p,
                None => {
                    return Err(Error::Parse {
                        line: *line,
                        reason: format!("orphan: parent `{parent_key}` of `{}` is never defined", names[*child]),
                    })
                }
            }
        }

        let mut children: Vec<Vec<usize>> = vec![Vec::new(); names.len()];
        for (c, &p) in parent.iter().enumerate() {
            if c != root {
                children[p].push(c);
            }
        }
        let mut depth = vec![0; names.len()];
        depth[root] = 1;
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            for &c in &children[n] {
                depth[c] = depth[n] + 1;
                queue.push_back(c);
            }
        }
        if let Some(stuck) = (0..names.len()).filter(|&n| depth[n] == 0).min_by_key(|&n| line_of[n]) {
            return Err(Error::Parse {
                line: line_of[stuck],
                reason: format!("`{}` is not reachable from the root (cycle)", names[stuck]),
            });
        }
        Ok(Self { names, index, parent, depth, root })
    }

    /// Serialises back to the TSV format, root first then breadth-first.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{0}\t{0}\n", self.names[self.root]);
        let mut order: Vec<usize> = (0..self.len()).filter(|&n| n != self.root).collect();
        order.sort_by_key(|&n| (self.depth[n], n));
        for n in order {
            out.push_str(&format!("{}\t{}\n", self.names[n], self.names[self.parent[n]]));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root_name(&self) -> &str {
        &self.names[self.root]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(&normalize_name(name))
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index.get(&normalize_name(name)).copied().ok_or_else(|| Error::Lookup(name.to_owned()))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    /// Display names of every node, in declaration order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn depth(&self, name: &str) -> Result<usize> {
        Ok(self.depth[self.id(name)?])
    }

    pub fn parent(&self, name: &str) -> Result<&str> {
        Ok(&self.names[self.parent[self.id(name)?]])
    }

    /// Nodes without children, in declaration order.
    pub fn leaves(&self) -> Vec<&str> {
        let mut has_child = vec![false; self.len()];
        for (c, &p) in self.parent.iter().enumerate() {
            if c != self.root {
                has_child[p] = true;
            }
        }
        (0..self.len()).filter(|&n| !has_child[n]).map(|n| self.names[n].as_str()).collect()
    }

    fn path_ids(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while cur != self.root {
            cur = self.parent[cur];
            path.push(cur);
        }
        path.reverse();
        path
    }

    /// Root-first ancestor chain ending at `name`.
    pub fn path_to_root(&self, name: &str) -> Result<Vec<&str>> {
        Ok(self.path_ids(self.id(name)?).into_iter().map(|n| self.names[n].as_str()).collect())
    }

    /// Ontology caption text, `root > ... > name`.
    pub fn path_caption(&self, name: &str) -> Result<String> {
        Ok(self.path_to_root(name)?.join(" > "))
    }

    pub fn path_similarity(&self, a: &str, b: &str, convention: PathConvention) -> Result<f64> {
        let pa = self.path_ids(self.id(a)?);
        let pb = self.path_ids(self.id(b)?);
        Ok(similarity_of_paths(&pa, &pb, convention))
    }

    /// Pairwise path similarity for a batch of labels.
    pub fn batch_similarity(&self, labels: &[impl AsRef<str>], convention: PathConvention) -> Result<Tensor> {
        let paths = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                self.id(l.as_ref())
                    .map(|id| self.path_ids(id))
                    .map_err(|_| Error::Lookup(format!("{} (sample {i})", l.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        let b = paths.len();
        let mut data = vec![0.0; b * b];
        for i in 0..b {
            for j in i..b {
                let s = similarity_of_paths(&paths[i], &paths[j], convention);
                data[i * b + j] = s;
                data[j * b + i] = s;
            }
        }
        Tensor::matrix(b, b, data)
    }
}

fn similarity_of_paths(a: &[usize], b: &[usize], convention: PathConvention) -> f64 {
    let shared = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let offset = match convention {
        PathConvention::RootCounted => 0,
        PathConvention::RootExcluded => 1,
    };
    let total = (a.len() - offset) + (b.len() - offset);
    if total == 0 {
        return 1.0;
    }
    2.0 * (shared - offset) as f64 / total as f64
}

/// Blend of one-hot batch targets with a temperature softmax over similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix {
    pub entries: Tensor,
    pub beta: f64,
    pub tau_s: f64,
}

impl SoftLabelMatrix {
    pub fn one_hot(b: usize) -> Self {
        Self { entries: Tensor::identity(b), beta: 0.0, tau_s: 1.0 }
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.entries.row_slice(i)
    }
}

/// `(1 − β)·onehot + β·softmax_rows(S / τ_s)` where the one-hot keys on batch index.
pub fn soft_labels(similarity: &Tensor, beta: f64, tau_s: f64) -> Result<SoftLabelMatrix> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::param("beta", format!("must lie in [0, 1], got {beta}")));
    }
    if !(tau_s > 0.0) || !tau_s.is_finite() {
        return Err(Error::param("tau_s", format!("must be positive, got {tau_s}")));
    }
    let b = similarity.rows();
    if similarity.cols() != b {
        return Err(Error::dim("soft_labels", format!("similarity must be square, got {:?}", similarity.shape())));
    }
    let mut data = Vec::with_capacity(b * b);
    for i in 0..b {
        let soft = softmax_slice(similarity.row_slice(i), tau_s);
        data.extend(soft.into_iter().enumerate().map(|(j, s)| {
            let hard = if i == j { 1.0 } else { 0.0 };
            (1.0 - beta) * hard + beta * s
        }));
    }
    Ok(SoftLabelMatrix { entries: Tensor::matrix(b, b, data)?, beta, tau_s })
}
