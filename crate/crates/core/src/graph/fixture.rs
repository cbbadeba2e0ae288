//! Small hand-built graphs for tests, examples and gradient checks.

use ndarray::array;

use super::{generate_synthetic, EdgeType, HeteroGraph, NodeType, Schema, Splits, SyntheticSpec};

/// Papers `p0`, `p1` and author `a0` (global ids 0, 1, 2) with edge types
/// `A-P` (a0→p0, a0→p1) and `P-A` (p0→a0, p1→a0). Target type `P`, two
/// classes.
pub fn paper_author() -> HeteroGraph {
    let schema = Schema::new(
        vec![
            NodeType {
                name: "P".into(),
                count: 2,
                feature_dim: 3,
            },
            NodeType {
                name: "A".into(),
                count: 1,
                feature_dim: 2,
            },
        ],
        vec![
            EdgeType {
                name: "A-P".into(),
                src: 1,
                dst: 0,
            },
            EdgeType {
                name: "P-A".into(),
                src: 0,
                dst: 1,
            },
        ],
        0,
        2,
    )
    .expect("fixture schema is valid");
    HeteroGraph::new(
        schema,
        vec![array![[1.0, 0.0, 0.5], [0.0, 1.0, -0.5]], array![[0.3, -0.7]]],
        vec![vec![(0, 0), (0, 1)], vec![(0, 0), (1, 0)]],
        vec![0, 1],
        Splits {
            train: vec![0],
            val: vec![1],
            test: vec![],
        },
    )
    .expect("fixture graph is valid")
}

/// Three node types and four edge types over sixteen nodes, so every
/// aggregator sees at least two incoming edge types at the target.
pub fn academic_small(seed: u64) -> HeteroGraph {
    let mut spec = SyntheticSpec::academic(10, 4, 2, 4, 2, 2.0, seed);
    spec.train_fraction = 0.4;
    spec.val_fraction = 0.3;
    generate_synthetic(&spec).expect("small academic spec is valid")
}
