//! Independent oracles for the acceptance checks. Nothing here calls the
//! crate's numerical code; only graph construction and accessors are shared.

#![allow(dead_code)]

use hetgt::graph::{EdgeType, HeteroGraph, NodeType, Schema, Splits};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

/// Two or three node types, two to five edge types (possibly same-type),
/// arbitrary density. Target type 0 with two classes.
pub fn random_graph<R: Rng>(rng: &mut R, max_count: usize) -> HeteroGraph {
    let n_types = rng.random_range(2..=3);
    let node_types: Vec<NodeType> = (0..n_types)
        .map(|i| NodeType {
            name: format!("T{i}"),
            count: rng.random_range(if i == 0 { 2 } else { 1 }..=max_count),
            feature_dim: rng.random_range(1..=4),
        })
        .collect();
    let n_edges = rng.random_range(2..=5);
    let mut edge_types: Vec<EdgeType> = (0..n_edges)
        .map(|k| EdgeType {
            name: format!("E{k}"),
            src: rng.random_range(0..n_types),
            dst: rng.random_range(0..n_types),
        })
        .collect();
    // Every node type is reachable from somewhere, so deep layers mix types.
    edge_types[0].dst = 0;
    edge_types[0].src = 1;
    let schema = Schema::new(node_types.clone(), edge_types.clone(), 0, 2).expect("random schema");
    let features = node_types
        .iter()
        .map(|nt| Array2::from_shape_simple_fn((nt.count, nt.feature_dim), || rng.random_range(-1.0f32..1.0)))
        .collect();
    let edges = edge_types
        .iter()
        .map(|et| {
            let (ns, nd) = (node_types[et.src].count, node_types[et.dst].count);
            let p = rng.random_range(0.05..0.6);
            let mut list = Vec::new();
            for s in 0..ns {
                for d in 0..nd {
                    if rng.random_bool(p) {
                        list.push((s, d));
                    }
                }
            }
            list
        })
        .collect();
    let n_target = node_types[0].count;
    let labels = (0..n_target).map(|_| rng.random_range(0..2)).collect();
    let mut ids: Vec<usize> = (0..n_target).collect();
    ids.shuffle(rng);
    let half = n_target / 2;
    let splits = Splits {
        train: ids[..half].to_vec(),
        val: ids[half..].to_vec(),
        test: vec![],
    };
    HeteroGraph::new(schema, features, edges, labels, splits).expect("random graph")
}

/// Relabels local ids: node `i` of type `t` becomes `perm[t][i]`.
pub fn permute_graph(g: &HeteroGraph, perm: &[Vec<usize>]) -> HeteroGraph {
    let schema = g.schema();
    let features = (0..schema.node_types().len())
        .map(|t| {
            let x = g.features(t);
            let mut y = Array2::zeros(x.raw_dim());
            for (i, row) in x.rows().into_iter().enumerate() {
                y.row_mut(perm[t][i]).assign(&row);
            }
            y
        })
        .collect();
    let edges = schema
        .edge_types()
        .iter()
        .enumerate()
        .map(|(k, et)| {
            g.edges(k)
                .iter()
                .map(|&(s, d)| (perm[et.src][s], perm[et.dst][d]))
                .collect()
        })
        .collect();
    let tt = schema.target_type();
    let mut labels = vec![0; g.labels().len()];
    for (i, &l) in g.labels().iter().enumerate() {
        labels[perm[tt][i]] = l;
    }
    let map = |ids: &[usize]| ids.iter().map(|&i| perm[tt][i]).collect();
    let splits = Splits {
        train: map(&g.splits().train),
        val: map(&g.splits().val),
        test: map(&g.splits().test),
    };
    HeteroGraph::new(schema.clone(), features, edges, labels, splits).expect("permuted graph")
}

pub fn random_permutations<R: Rng>(rng: &mut R, g: &HeteroGraph) -> Vec<Vec<usize>> {
    g.schema()
        .node_types()
        .iter()
        .map(|nt| {
            let mut p: Vec<usize> = (0..nt.count).collect();
            p.shuffle(rng);
            p
        })
        .collect()
}

/// Dense global `D̃⁻¹(A + I)` for one edge type, built straight from the
/// edge list: destination rows only, other rows zero.
pub fn dense_normalized_adjacency(g: &HeteroGraph, k: usize) -> Array2<f64> {
    let schema = g.schema();
    let et = &schema.edge_types()[k];
    let n = g.num_nodes();
    let mut a = Array2::<f64>::zeros((n, n));
    for &(s, d) in g.edges(k) {
        a[[schema.global_id(et.dst, d), schema.global_id(et.src, s)]] = 1.0;
    }
    for u in schema.block(et.dst) {
        a[[u, u]] = 1.0;
        let deg: f64 = a.row(u).sum();
        a.row_mut(u).mapv_inplace(|v| v / deg);
    }
    a
}

/// Multinomial logistic regression on raw target features, trained with
/// hand-derived full-batch gradients. The depth-0 baseline: no graph.
pub struct LinearProbe {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl LinearProbe {
    pub fn fit(
        x: &Array2<f64>,
        labels: &[usize],
        rows: &[usize],
        classes: usize,
        epochs: usize,
        lr: f64,
        l2: f64,
    ) -> Self {
        let d = x.ncols();
        let mut w = Array2::<f64>::zeros((d, classes));
        let mut b = Array1::<f64>::zeros(classes);
        let n = rows.len() as f64;
        for _ in 0..epochs {
            let mut gw = Array2::<f64>::zeros((d, classes));
            let mut gb = Array1::<f64>::zeros(classes);
            for &r in rows {
                let p = softmax(&(x.row(r).dot(&w) + &b));
                for c in 0..classes {
                    let err = p[c] - if labels[r] == c { 1.0 } else { 0.0 };
                    gb[c] += err / n;
                    for j in 0..d {
                        gw[[j, c]] += err * x[[r, j]] / n;
                    }
                }
            }
            w = &w - &((gw + &w * l2) * lr);
            b = &b - &(gb * lr);
        }
        Self { w, b }
    }

    pub fn predict(&self, x: &Array2<f64>, rows: &[usize]) -> Vec<usize> {
        rows.iter()
            .map(|&r| argmax(&(x.row(r).dot(&self.w) + &self.b)))
            .collect()
    }
}

fn softmax(z: &Array1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

pub fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Unweighted mean of per-class F1 over classes seen in truth or prediction.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> f64 {
    let classes: std::collections::BTreeSet<usize> = pred.iter().chain(truth).copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let actual = truth.iter().filter(|&&t| t == c).count() as f64;
        if tp > 0.0 {
            total += 2.0 * tp / (predicted + actual);
        }
    }
    total / classes.len() as f64
}

/// Sort, slice off `⌊n·pct/100⌋` from each end, mean and sample std.
pub fn sort_slice_trim(values: &[f64], pct: usize) -> (f64, f64, usize) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = v.len() * pct / 100;
    let kept = &v[k..v.len() - k];
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt(), kept.len())
}
