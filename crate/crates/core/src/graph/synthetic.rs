//! Seeded random heterogeneous graphs with a controllable class signal.
//!
//! Target features are `signal / √2 · e_c + N(0, noise²)`, so class means
//! sit at pairwise distance `signal`. Every non-target node carries a latent
//! class; with probability `homophily` an edge joins endpoints of the same
//! class. Non-target features are the mean of already-generated neighbour
//! features plus noise, filled in breadth-first order of node types from the
//! target type.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EdgeType, HeteroGraph, NodeType, Schema, Splits};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticNodeType {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticEdgeType {
    pub name: String,
    pub src: String,
    pub dst: String,
    /// Expected out-degree of each source node. Ignored with `reverse_of`.
    #[serde(default)]
    pub degree: f64,
    /// Mirror the edges of another edge type with swapped endpoints.
    #[serde(default)]
    pub reverse_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub node_types: Vec<SyntheticNodeType>,
    pub edge_types: Vec<SyntheticEdgeType>,
    pub target_type: String,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Distance between class means of target features.
    pub signal: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_homophily")]
    pub homophily: f64,
    /// Fraction of the smallest class used for training, per class.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    1.0
}

fn default_homophily() -> f64 {
    0.8
}

fn default_train_fraction() -> f64 {
    0.2
}

fn default_val_fraction() -> f64 {
    0.2
}

impl SyntheticSpec {
    /// Paper/author/subject-style graph: three node types, four edge types
    /// (two reverse pairs) with target `P`.
    pub fn academic(
        papers: usize,
        authors: usize,
        subjects: usize,
        feature_dim: usize,
        num_classes: usize,
        signal: f64,
        seed: u64,
    ) -> Self {
        let nt = |name: &str, count| SyntheticNodeType {
            name: name.into(),
            count,
        };
        let et = |name: &str, src: &str, dst: &str, degree, reverse_of: Option<&str>| SyntheticEdgeType {
            name: name.into(),
            src: src.into(),
            dst: dst.into(),
            degree,
            reverse_of: reverse_of.map(Into::into),
        };
        Self {
            node_types: vec![nt("P", papers), nt("A", authors), nt("S", subjects)],
            edge_types: vec![
                et("P-A", "P", "A", 3.0, None),
                et("A-P", "A", "P", 0.0, Some("P-A")),
                et("P-S", "P", "S", 1.0, None),
                et("S-P", "S", "P", 0.0, Some("P-S")),
            ],
            target_type: "P".into(),
            feature_dim,
            num_classes,
            signal,
            noise: default_noise(),
            homophily: default_homophily(),
            train_fraction: default_train_fraction(),
            val_fraction: default_val_fraction(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if let Some(n) = self.node_types.iter().find(|n| n.count == 0) {
            return bad(format!("node type `{}` has count 0", n.name));
        }
        if self.feature_dim < self.num_classes {
            return bad(format!(
                "feature_dim {} is smaller than num_classes {}",
                self.feature_dim, self.num_classes
            ));
        }
        if !(self.signal.is_finite() && self.signal >= 0.0) {
            return bad(format!("signal must be finite and non-negative, got {}", self.signal));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.homophily) {
            return bad(format!("homophily must lie in [0, 1], got {}", self.homophily));
        }
        let (tf, vf) = (self.train_fraction, self.val_fraction);
        if !(tf > 0.0 && vf >= 0.0 && tf + vf < 1.0) {
            return bad(format!(
                "train_fraction {tf} and val_fraction {vf} must be positive and sum below 1"
            ));
        }
        if let Some(e) = self
            .edge_types
            .iter()
            .find(|e| !(e.degree.is_finite() && e.degree >= 0.0))
        {
            return bad(format!("edge type `{}` has invalid degree {}", e.name, e.degree));
        }
        Ok(())
    }
}

/// Deterministic in `spec` (including its seed).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<HeteroGraph> {
    spec.validate()?;
    let node_types: Vec<NodeType> = spec
        .node_types
        .iter()
        .map(|n| NodeType {
            name: n.name.clone(),
            count: n.count,
            feature_dim: spec.feature_dim,
        })
        .collect();
    let index = |name: &str| {
        node_types
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::Config(format!("`{name}` is not a declared node type")))
    };
    let mut edge_types = Vec::new();
    for e in &spec.edge_types {
        edge_types.push(EdgeType {
            name: e.name.clone(),
            src: index(&e.src)?,
            dst: index(&e.dst)?,
        });
    }
    let target = index(&spec.target_type)?;
    let schema = Schema::new(node_types, edge_types, target, spec.num_classes)?;
    let types = schema.node_types();
    let c = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Exactly balanced classes up to remainder, in shuffled order.
    let classes: Vec<Vec<usize>> = types
        .iter()
        .map(|t| {
            let mut v: Vec<usize> = (0..t.count).map(|i| i % c).collect();
            v.shuffle(&mut rng);
            v
        })
        .collect();
    let by_class: Vec<Vec<Vec<usize>>> = classes
        .iter()
        .map(|cls| {
            let mut groups = vec![Vec::new(); c];
            for (i, &k) in cls.iter().enumerate() {
                groups[k].push(i);
            }
            groups
        })
        .collect();

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); spec.edge_types.len()];
    for (k, e) in spec.edge_types.iter().enumerate() {
        if e.reverse_of.is_some() {
            continue;
        }
        let et = &schema.edge_types()[k];
        let (ns, nd) = (types[et.src].count, types[et.dst].count);
        let m = (e.degree * ns as f64).round() as usize;
        for _ in 0..m {
            let s = rng.random_range(0..ns);
            let pool = &by_class[et.dst][classes[et.src][s]];
            let d = if !pool.is_empty() && rng.random_bool(spec.homophily) {
                pool[rng.random_range(0..pool.len())]
            } else {
                rng.random_range(0..nd)
            };
            edges[k].push((s, d));
        }
    }
    for (k, e) in spec.edge_types.iter().enumerate() {
        let Some(orig) = &e.reverse_of else { continue };
        let j = schema
            .edge_type_index(orig)
            .ok_or_else(|| Error::Config(format!("edge type `{}` reverses unknown `{orig}`", e.name)))?;
        let (a, b) = (&schema.edge_types()[k], &schema.edge_types()[j]);
        if a.src != b.dst || a.dst != b.src || spec.edge_types[j].reverse_of.is_some() {
            return Err(Error::Config(format!("edge type `{}` cannot reverse `{orig}`", e.name)));
        }
        edges[k] = edges[j].iter().map(|&(s, d)| (d, s)).collect();
    }

    let scale = spec.signal / std::f64::consts::SQRT_2;
    let noise = |rng: &mut ChaCha8Rng| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        spec.noise * z
    };
    let mut features: Vec<Option<Array2<f32>>> = vec![None; types.len()];
    let labels = classes[target].clone();
    let mut x = Array2::<f32>::zeros((types[target].count, spec.feature_dim));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let mean = if j == labels[i] { scale } else { 0.0 };
            *v = (mean + noise(&mut rng)) as f32;
        }
    }
    features[target] = Some(x);

    for t in type_order(&schema, target) {
        if features[t].is_some() {
            continue;
        }
        let n = types[t].count;
        let mut sums = Array2::<f64>::zeros((n, spec.feature_dim));
        let mut counts = vec![0usize; n];
        for (k, et) in schema.edge_types().iter().enumerate() {
            let pairs = edges[k].iter().filter_map(|&(s, d)| {
                if et.dst == t {
                    features[et.src].as_ref().map(|f| (d, f.row(s)))
                } else if et.src == t {
                    features[et.dst].as_ref().map(|f| (s, f.row(d)))
                } else {
                    None
                }
            });
            for (u, row) in pairs {
                counts[u] += 1;
                sums.row_mut(u).zip_mut_with(&row, |a, &b| *a += b as f64);
            }
        }
        let mut x = Array2::<f32>::zeros((n, spec.feature_dim));
        for u in 0..n {
            let denom = counts[u].max(1) as f64;
            for j in 0..spec.feature_dim {
                x[[u, j]] = (sums[[u, j]] / denom + noise(&mut rng)) as f32;
            }
        }
        features[t] = Some(x);
    }

    let per_class = by_class[target].iter().map(Vec::len).min().unwrap_or(0);
    let n_train = ((spec.train_fraction * per_class as f64).floor() as usize)
        .max(1)
        .min(per_class);
    let n_val = ((spec.val_fraction * per_class as f64).floor() as usize).min(per_class - n_train);
    let mut splits = Splits::default();
    for group in &by_class[target] {
        let mut g = group.clone();
        g.shuffle(&mut rng);
        splits.train.extend_from_slice(&g[..n_train]);
        splits.val.extend_from_slice(&g[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&g[n_train + n_val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();

    let features = features.into_iter().map(Option::unwrap).collect();
    HeteroGraph::new(schema, features, edges, labels, splits)
}

/// Node types in breadth-first order over the undirected type graph,
/// starting at `start`; unreachable types follow in schema order.
fn type_order(schema: &Schema, start: usize) -> Vec<usize> {
    let n = schema.node_types().len();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(t) = queue.pop_front() {
        order.push(t);
        for e in schema.edge_types() {
            for (a, b) in [(e.src, e.dst), (e.dst, e.src)] {
                if a == t && !seen[b] {
                    seen[b] = true;
                    queue.push_back(b);
                }
            }
        }
    }
    order.extend((0..n).filter(|&t| !seen[t]));
    order
}
