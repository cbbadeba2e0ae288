//! Typed graphs over a global node index.
//!
//! Node types occupy contiguous blocks of the global index in schema order,
//! so every edge type's adjacency is a square matrix over all nodes whose
//! non-empty rows are exactly the destination type's block.

pub mod fixture;
mod io;
mod synthetic;

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{SegmentIndex, SparseAdjacency};

pub use io::{load_dataset, write_dataset, FeatureFormat, Manifest};
pub use synthetic::{generate_synthetic, SyntheticEdgeType, SyntheticNodeType, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeType {
    pub name: String,
    pub count: usize,
    pub feature_dim: usize,
}

/// A directed relation; messages flow from `src` nodes to `dst` nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeType {
    pub name: String,
    pub src: usize,
    pub dst: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    node_types: Vec<NodeType>,
    edge_types: Vec<EdgeType>,
    target_type: usize,
    num_classes: usize,
    offsets: Vec<usize>,
}

impl Schema {
    /// Validated heterogeneous schema (`|node types| + |edge types| > 2`).
    pub fn new(
        node_types: Vec<NodeType>,
        edge_types: Vec<EdgeType>,
        target_type: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if node_types.len() + edge_types.len() <= 2 {
            return Err(Error::Config(format!(
                "{} node types and {} edge types do not form a heterogeneous graph",
                node_types.len(),
                edge_types.len()
            )));
        }
        Self::build(node_types, edge_types, target_type, num_classes)
    }

    /// One node type with one self-relation. Exists for reductions to the
    /// homogeneous case; [`Schema::new`] rejects it.
    pub fn homogeneous(node: NodeType, edge_name: &str, num_classes: usize) -> Result<Self> {
        let edge = EdgeType {
            name: edge_name.to_string(),
            src: 0,
            dst: 0,
        };
        Self::build(vec![node], vec![edge], 0, num_classes)
    }

    fn build(
        node_types: Vec<NodeType>,
        edge_types: Vec<EdgeType>,
        target_type: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &node_types {
            if !seen.insert(n.name.as_str()) {
                return Err(Error::Config(format!("duplicate node type `{}`", n.name)));
            }
        }
        let mut seen = HashSet::new();
        for e in &edge_types {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate edge type `{}`", e.name)));
            }
            if e.src >= node_types.len() || e.dst >= node_types.len() {
                return Err(Error::Config(format!(
                    "edge type `{}` references an undeclared node type",
                    e.name
                )));
            }
        }
        if target_type >= node_types.len() {
            return Err(Error::Config("target type is not a declared node type".into()));
        }
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        let mut offsets = Vec::with_capacity(node_types.len() + 1);
        offsets.push(0);
        for n in &node_types {
            offsets.push(offsets.last().unwrap() + n.count);
        }
        Ok(Self {
            node_types,
            edge_types,
            target_type,
            num_classes,
            offsets,
        })
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    pub fn edge_types(&self) -> &[EdgeType] {
        &self.edge_types
    }

    pub fn target_type(&self) -> usize {
        self.target_type
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_nodes(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn node_type_index(&self, name: &str) -> Option<usize> {
        self.node_types.iter().position(|n| n.name == name)
    }

    pub fn edge_type_index(&self, name: &str) -> Option<usize> {
        self.edge_types.iter().position(|e| e.name == name)
    }

    /// Global id range of a node type.
    pub fn block(&self, node_type: usize) -> Range<usize> {
        self.offsets[node_type]..self.offsets[node_type + 1]
    }

    pub fn global_id(&self, node_type: usize, local: usize) -> usize {
        self.offsets[node_type] + local
    }

    /// `(node type, local id)` of a global id.
    pub fn locate(&self, global: usize) -> Option<(usize, usize)> {
        if global >= self.num_nodes() {
            return None;
        }
        let t = self.offsets.partition_point(|&o| o <= global) - 1;
        Some((t, global - self.offsets[t]))
    }

    /// Edge types whose destination is `node_type`, in schema order.
    pub fn incoming(&self, node_type: usize) -> Vec<usize> {
        (0..self.edge_types.len())
            .filter(|&k| self.edge_types[k].dst == node_type)
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Features, typed edges, labels and splits for one target node type.
///
/// Edge lists are stored canonically: sorted by `(dst, src)`, without
/// duplicates, and without self-edges (the self-loop is always implied).
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    schema: Schema,
    features: Vec<Array2<f32>>,
    edges: Vec<Vec<(usize, usize)>>,
    labels: Vec<usize>,
    splits: Splits,
}

impl HeteroGraph {
    /// `edges[k]` holds `(src local id, dst local id)` pairs of edge type `k`.
    pub fn new(
        schema: Schema,
        features: Vec<Array2<f32>>,
        edges: Vec<Vec<(usize, usize)>>,
        labels: Vec<usize>,
        splits: Splits,
    ) -> Result<Self> {
        if features.len() != schema.node_types.len() {
            return Err(Error::Structural(format!(
                "{} feature matrices for {} node types",
                features.len(),
                schema.node_types.len()
            )));
        }
        for (f, nt) in features.iter().zip(&schema.node_types) {
            if f.dim() != (nt.count, nt.feature_dim) {
                return Err(Error::Structural(format!(
                    "features of `{}` are {:?}, expected ({}, {})",
                    nt.name,
                    f.dim(),
                    nt.count,
                    nt.feature_dim
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Structural(format!("non-finite feature in `{}`", nt.name)));
            }
        }
        if edges.len() != schema.edge_types.len() {
            return Err(Error::Structural(format!(
                "{} edge lists for {} edge types",
                edges.len(),
                schema.edge_types.len()
            )));
        }
        let mut canonical = Vec::with_capacity(edges.len());
        for (list, et) in edges.into_iter().zip(&schema.edge_types) {
            let (ns, nd) = (schema.node_types[et.src].count, schema.node_types[et.dst].count);
            if let Some(&(s, d)) = list.iter().find(|&&(s, d)| s >= ns || d >= nd) {
                return Err(Error::Structural(format!(
                    "edge ({s}, {d}) of `{}` out of range ({ns} sources, {nd} destinations)",
                    et.name
                )));
            }
            canonical.push(canonical_edges(list, et.src == et.dst));
        }
        let n_target = schema.node_types[schema.target_type].count;
        if labels.len() != n_target {
            return Err(Error::Structural(format!(
                "{} labels for {n_target} target nodes",
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l >= schema.num_classes) {
            return Err(Error::Structural(format!(
                "label {} of node {i} outside [0, {})",
                labels[i], schema.num_classes
            )));
        }
        check_splits(&splits, n_target)?;
        Ok(Self {
            schema,
            features,
            edges: canonical,
            labels,
            splits,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn features(&self, node_type: usize) -> &Array2<f32> {
        &self.features[node_type]
    }

    pub fn all_features(&self) -> &[Array2<f32>] {
        &self.features
    }

    pub fn edges(&self, edge_type: usize) -> &[(usize, usize)] {
        &self.edges[edge_type]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn num_nodes(&self) -> usize {
        self.schema.num_nodes()
    }

    /// Replaces raw features of one node type, keeping everything else.
    pub fn with_features(&self, node_type: usize, features: Array2<f32>) -> Result<Self> {
        let mut all = self.features.clone();
        all[node_type] = features;
        Self::new(
            self.schema.clone(),
            all,
            self.edges.clone(),
            self.labels.clone(),
            self.splits.clone(),
        )
    }

    /// Sorted in-neighbour sources (global ids) of every destination node of
    /// `edge_type`, excluding the node itself.
    fn in_neighbors(&self, edge_type: usize) -> Vec<Vec<usize>> {
        let et = &self.schema.edge_types[edge_type];
        let mut nbrs = vec![Vec::new(); self.schema.node_types[et.dst].count];
        for &(s, d) in &self.edges[edge_type] {
            nbrs[d].push(self.schema.global_id(et.src, s));
        }
        nbrs
    }

    fn csr_with_self(&self, edge_type: usize) -> Result<(Vec<usize>, Vec<usize>, Range<usize>)> {
        let et = self
            .schema
            .edge_types
            .get(edge_type)
            .ok_or_else(|| Error::Config(format!("edge type {edge_type} not declared")))?;
        let block = self.schema.block(et.dst);
        let n = self.num_nodes();
        let nbrs = self.in_neighbors(edge_type);
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(self.edges[edge_type].len() + block.len());
        row_ptr.push(0);
        for u in 0..n {
            if block.contains(&u) {
                let mut row = nbrs[u - block.start].clone();
                row.push(u);
                row.sort_unstable();
                col_idx.extend(row);
            }
            row_ptr.push(col_idx.len());
        }
        Ok((row_ptr, col_idx, block))
    }

    /// Global adjacency index `(dst, src)` per edge.
    pub fn adjacency_entries(&self, edge_type: usize) -> Vec<(usize, usize)> {
        let et = &self.schema.edge_types[edge_type];
        self.edges[edge_type]
            .iter()
            .map(|&(s, d)| (self.schema.global_id(et.dst, d), self.schema.global_id(et.src, s)))
            .collect()
    }
}

fn canonical_edges(mut list: Vec<(usize, usize)>, same_type: bool) -> Vec<(usize, usize)> {
    if same_type {
        list.retain(|&(s, d)| s != d);
    }
    list.sort_unstable_by_key(|&(s, d)| (d, s));
    list.dedup();
    list
}

fn check_splits(splits: &Splits, n_target: usize) -> Result<()> {
    let mut seen = vec![None; n_target];
    for (name, ids) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        for &i in ids {
            if i >= n_target {
                return Err(Error::Structural(format!(
                    "{name} split contains {i}, but there are {n_target} target nodes"
                )));
            }
            if let Some(prev) = seen[i] {
                return Err(Error::Structural(format!(
                    "target node {i} appears in both {prev} and {name} splits"
                )));
            }
            seen[i] = Some(name);
        }
    }
    Ok(())
}

/// `D̃⁻¹(A + I)` for one edge type: row `u` of a destination node holds
/// `1 / (|N_u| + 1)` at each in-neighbour and at `u` itself; all other rows
/// are empty.
pub fn normalize_adjacency<T: Scalar>(g: &HeteroGraph, edge_type: usize) -> Result<SparseAdjacency<T>> {
    let (row_ptr, col_idx, block) = g.csr_with_self(edge_type)?;
    let mut values = Vec::with_capacity(col_idx.len());
    for u in 0..g.num_nodes() {
        let deg = row_ptr[u + 1] - row_ptr[u];
        let w = T::one() / T::of(deg as f64);
        values.extend(std::iter::repeat_n(w, deg));
    }
    SparseAdjacency::from_csr(g.num_nodes(), row_ptr, col_idx, values, block)
}

/// Attention segments of one edge type: each destination node's
/// in-neighbours plus its self entry.
pub fn build_segments(g: &HeteroGraph, edge_type: usize) -> Result<SegmentIndex> {
    let (row_ptr, col_idx, block) = g.csr_with_self(edge_type)?;
    SegmentIndex::from_csr(g.num_nodes(), row_ptr, col_idx, block)
}

/// Nodes whose features can reach `node` within `k` propagation steps,
/// i.e. nodes with a directed path of length ≤ k into `node` over the union
/// of all edge types. Includes `node`.
pub fn k_hop_neighborhood(g: &HeteroGraph, node: usize, k: usize) -> Result<BTreeSet<usize>> {
    let n = g.num_nodes();
    if node >= n {
        return Err(Error::Contract(format!(
            "node {node} out of range (graph has {n} nodes)"
        )));
    }
    let mut incoming = vec![Vec::new(); n];
    for et in 0..g.schema.edge_types.len() {
        for (dst, src) in g.adjacency_entries(et) {
            incoming[dst].push(src);
        }
    }
    let mut seen = BTreeSet::from([node]);
    let mut frontier = VecDeque::from([(node, 0usize)]);
    while let Some((u, d)) = frontier.pop_front() {
        if d == k {
            continue;
        }
        for &v in &incoming[u] {
            if seen.insert(v) {
                frontier.push_back((v, d + 1));
            }
        }
    }
    Ok(seen)
}

#[cfg(test)]
mod tests;
