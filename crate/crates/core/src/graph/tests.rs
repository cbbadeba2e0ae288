use std::collections::BTreeSet;
use std::fs;

use ndarray::Array2;
use proptest::prelude::*;

use super::fixture::{academic_small, paper_author};
use super::*;

const P0: usize = 0;
const P1: usize = 1;
const A0: usize = 2;

fn row_map(adj: &SparseAdjacency<f64>, u: usize) -> Vec<(usize, f64)> {
    adj.row(u).collect()
}

#[test]
fn fixture_layout() {
    let g = paper_author();
    assert_eq!(g.num_nodes(), 3);
    assert_eq!(g.schema().edge_types().len(), 2);
    assert_eq!(g.schema().block(0), 0..2);
    assert_eq!(g.schema().block(1), 2..3);
    assert_eq!(g.schema().locate(A0), Some((1, 0)));
    assert_eq!(g.schema().locate(3), None);
    assert_eq!(g.schema().incoming(0), vec![0]);
}

#[test]
fn fixture_normalized_adjacency() {
    let g = paper_author();
    let ap = normalize_adjacency::<f64>(&g, 0).unwrap();
    assert_eq!(row_map(&ap, P0), vec![(P0, 0.5), (A0, 0.5)]);
    assert_eq!(row_map(&ap, P1), vec![(P1, 0.5), (A0, 0.5)]);
    assert!(row_map(&ap, A0).is_empty());
    let pa = normalize_adjacency::<f64>(&g, 1).unwrap();
    let third = 1.0 / 3.0;
    assert_eq!(row_map(&pa, A0), vec![(P0, third), (P1, third), (A0, third)]);
    assert!(row_map(&pa, P0).is_empty());
}

#[test]
fn undeclared_edge_type_is_rejected() {
    assert!(normalize_adjacency::<f64>(&paper_author(), 5).is_err());
    assert!(build_segments(&paper_author(), 5).is_err());
}

#[test]
fn isolated_destination_gets_self_only() {
    let g = paper_author();
    let edges = vec![vec![(0, 0)], g.edges(1).to_vec()];
    let g = HeteroGraph::new(
        g.schema().clone(),
        g.all_features().to_vec(),
        edges,
        g.labels().to_vec(),
        g.splits().clone(),
    )
    .unwrap();
    let ap = normalize_adjacency::<f64>(&g, 0).unwrap();
    assert_eq!(row_map(&ap, P1), vec![(P1, 1.0)]);
    let seg = build_segments(&g, 0).unwrap();
    let segs: Vec<_> = seg.segments().map(|(u, s)| (u, s.to_vec())).collect();
    assert_eq!(segs, vec![(P0, vec![P0, A0]), (P1, vec![P1])]);
}

#[test]
fn fixture_segments() {
    let g = paper_author();
    let seg = build_segments(&g, 0).unwrap();
    let segs: Vec<_> = seg.segments().map(|(u, s)| (u, s.to_vec())).collect();
    assert_eq!(segs, vec![(P0, vec![P0, A0]), (P1, vec![P1, A0])]);
    assert_eq!(seg.num_entries(), 2 + 2);
}

#[test]
fn fixture_k_hop() {
    let g = paper_author();
    assert_eq!(k_hop_neighborhood(&g, P0, 0).unwrap(), BTreeSet::from([P0]));
    assert_eq!(k_hop_neighborhood(&g, P0, 1).unwrap(), BTreeSet::from([P0, A0]));
    assert_eq!(k_hop_neighborhood(&g, P0, 2).unwrap(), BTreeSet::from([P0, P1, A0]));
    assert!(matches!(k_hop_neighborhood(&g, 3, 1), Err(Error::Contract(_))));
}

#[test]
fn k_hop_of_isolated_node_is_itself() {
    let g = paper_author();
    let g = HeteroGraph::new(
        g.schema().clone(),
        g.all_features().to_vec(),
        vec![vec![(0, 0)], vec![(0, 0)]],
        g.labels().to_vec(),
        g.splits().clone(),
    )
    .unwrap();
    for k in [0, 1, 5] {
        assert_eq!(k_hop_neighborhood(&g, P1, k).unwrap(), BTreeSet::from([P1]));
    }
}

#[test]
fn schema_rejects_homogeneous_and_duplicates() {
    let nt = |name: &str| NodeType {
        name: name.into(),
        count: 1,
        feature_dim: 1,
    };
    let et = |name: &str, src, dst| EdgeType {
        name: name.into(),
        src,
        dst,
    };
    assert!(Schema::new(vec![nt("P")], vec![et("P-P", 0, 0)], 0, 2).is_err());
    assert!(Schema::homogeneous(nt("P"), "P-P", 2).is_ok());
    assert!(Schema::new(vec![nt("P"), nt("P")], vec![et("x", 0, 1)], 0, 2).is_err());
    assert!(Schema::new(vec![nt("P"), nt("A")], vec![et("x", 0, 1), et("x", 1, 0)], 0, 2).is_err());
    assert!(Schema::new(vec![nt("P"), nt("A")], vec![et("x", 0, 2)], 0, 2).is_err());
    assert!(Schema::new(vec![nt("P"), nt("A")], vec![et("x", 0, 1)], 0, 0).is_err());
}

#[test]
fn graph_validation() {
    let g = paper_author();
    let rebuild = |edges: Vec<Vec<(usize, usize)>>, labels: Vec<usize>, splits: Splits| {
        HeteroGraph::new(g.schema().clone(), g.all_features().to_vec(), edges, labels, splits)
    };
    let edges = || g.edges(0).to_vec();
    assert!(rebuild(vec![edges(), vec![(2, 0)]], vec![0, 1], Splits::default()).is_err());
    assert!(rebuild(vec![edges(), vec![]], vec![0, 2], Splits::default()).is_err());
    let overlap = Splits {
        train: vec![0],
        val: vec![0],
        test: vec![],
    };
    assert!(rebuild(vec![edges(), vec![]], vec![0, 1], overlap).is_err());
    let bad_features = g.with_features(0, Array2::zeros((3, 3)));
    assert!(matches!(bad_features, Err(Error::Structural(_))));
}

#[test]
fn edges_are_canonical() {
    let g = paper_author();
    let g = HeteroGraph::new(
        g.schema().clone(),
        g.all_features().to_vec(),
        vec![vec![(0, 1), (0, 0), (0, 1)], vec![(1, 0), (0, 0)]],
        g.labels().to_vec(),
        g.splits().clone(),
    )
    .unwrap();
    assert_eq!(g.edges(0), &[(0, 0), (0, 1)]);
    assert_eq!(g.edges(1), &[(0, 0), (1, 0)]);
}

#[test]
fn dataset_round_trip_both_formats() {
    let g = academic_small(3);
    for format in [FeatureFormat::Csv, FeatureFormat::F32le] {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&g, dir.path(), format).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), g);
    }
}

fn written_fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&paper_author(), dir.path(), FeatureFormat::Csv).unwrap();
    dir
}

fn load_error(dir: &tempfile::TempDir) -> (String, Option<usize>, String) {
    match load_dataset(dir.path()) {
        Err(Error::Data { file, row, message }) => {
            (file.file_name().unwrap().to_string_lossy().into_owned(), row, message)
        }
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn fixture_directory_loads() {
    let dir = written_fixture();
    let g = load_dataset(dir.path()).unwrap();
    assert_eq!(g.num_nodes(), 3);
    assert_eq!(g.schema().edge_types().len(), 2);
}

#[test]
fn feature_row_count_mismatch_names_type() {
    let dir = written_fixture();
    let path = dir.path().join("features_0_P.csv");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.lines().next().unwrap()).unwrap();
    let (file, _, message) = load_error(&dir);
    assert_eq!(file, "features_0_P.csv");
    assert!(message.contains("`P`"), "{message}");
}

#[test]
fn feature_column_mismatch_names_row() {
    let dir = written_fixture();
    let path = dir.path().join("features_0_P.csv");
    fs::write(&path, "1,2,3\n1,2\n").unwrap();
    assert_eq!(load_error(&dir).1, Some(2));
}

#[test]
fn f32le_length_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&paper_author(), dir.path(), FeatureFormat::F32le).unwrap();
    let path = dir.path().join("features_1_A.f32");
    fs::write(&path, [0u8; 4]).unwrap();
    let (file, _, message) = load_error(&dir);
    assert_eq!(file, "features_1_A.f32");
    assert!(message.contains("`A`"), "{message}");
}

#[test]
fn missing_file_is_named() {
    let dir = written_fixture();
    fs::remove_file(dir.path().join("edges_1_P-A.csv")).unwrap();
    let (file, row, message) = load_error(&dir);
    assert_eq!((file.as_str(), row), ("edges_1_P-A.csv", None));
    assert!(message.contains("missing"));
}

#[test]
fn label_out_of_range_names_row() {
    let dir = written_fixture();
    fs::write(dir.path().join("labels.csv"), "local_id,label\n0,0\n1,7\n").unwrap();
    assert_eq!(
        load_error(&dir),
        ("labels.csv".into(), Some(3), "label 7 outside [0, 2)".into())
    );
}

#[test]
fn labels_must_cover_targets() {
    let dir = written_fixture();
    fs::write(dir.path().join("labels.csv"), "0,0\n").unwrap();
    let (file, _, message) = load_error(&dir);
    assert_eq!(file, "labels.csv");
    assert!(message.contains("no label"));
}

#[test]
fn overlapping_splits_are_rejected() {
    let dir = written_fixture();
    fs::write(dir.path().join("splits.json"), r#"{"train":[0],"val":[1],"test":[0]}"#).unwrap();
    let (file, _, message) = load_error(&dir);
    assert_eq!(file, "splits.json");
    assert!(message.contains("both train and test"), "{message}");
}

#[test]
fn edge_endpoint_out_of_range_names_row() {
    let dir = written_fixture();
    fs::write(
        dir.path().join("edges_0_A-P.csv"),
        "src_local_id,dst_local_id\n0,0\n0,9\n",
    )
    .unwrap();
    let (file, row, _) = load_error(&dir);
    assert_eq!((file.as_str(), row), ("edges_0_A-P.csv", Some(3)));
}

#[test]
fn manifest_errors_point_at_manifest() {
    let dir = written_fixture();
    let path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("\"target_type\": \"P\"", "\"target_type\": \"X\"");
    fs::write(&path, text).unwrap();
    let (file, _, message) = load_error(&dir);
    assert_eq!(file, "manifest.json");
    assert!(message.contains("`X`"), "{message}");
}

#[test]
fn synthetic_counts_and_determinism() {
    let spec = SyntheticSpec {
        node_types: vec![
            SyntheticNodeType {
                name: "P".into(),
                count: 50,
            },
            SyntheticNodeType {
                name: "A".into(),
                count: 30,
            },
        ],
        edge_types: vec![
            SyntheticEdgeType {
                name: "P-A".into(),
                src: "P".into(),
                dst: "A".into(),
                degree: 2.0,
                reverse_of: None,
            },
            SyntheticEdgeType {
                name: "A-P".into(),
                src: "A".into(),
                dst: "P".into(),
                degree: 0.0,
                reverse_of: Some("P-A".into()),
            },
        ],
        target_type: "P".into(),
        feature_dim: 4,
        num_classes: 2,
        signal: 4.0,
        noise: 1.0,
        homophily: 0.8,
        train_fraction: 0.2,
        val_fraction: 0.2,
        seed: 7,
    };
    let a = generate_synthetic(&spec).unwrap();
    let counts: Vec<usize> = a.schema().node_types().iter().map(|n| n.count).collect();
    assert_eq!(counts, vec![50, 30]);
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a, b);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&a, da.path(), FeatureFormat::F32le).unwrap();
    write_dataset(&b, db.path(), FeatureFormat::F32le).unwrap();
    for name in ["features_0_P.f32", "features_1_A.f32", "edges_0_P-A.csv", "splits.json"] {
        assert_eq!(
            fs::read(da.path().join(name)).unwrap(),
            fs::read(db.path().join(name)).unwrap()
        );
    }
    let reversed: Vec<(usize, usize)> = a.edges(0).iter().map(|&(s, d)| (d, s)).collect();
    let mut mirror = a.edges(1).to_vec();
    mirror.sort_unstable_by_key(|&(s, d)| (s, d));
    let mut reversed_sorted = reversed;
    reversed_sorted.sort_unstable();
    assert_eq!(mirror, reversed_sorted);
    // Balanced splits: equal train and val counts per class.
    for split in [&a.splits().train, &a.splits().val] {
        let ones = split.iter().filter(|&&i| a.labels()[i] == 1).count();
        assert_eq!(ones * 2, split.len());
    }
    let mut other = spec.clone();
    other.seed = 8;
    assert_ne!(generate_synthetic(&other).unwrap(), a);
}

#[test]
fn synthetic_rejects_degenerate_specs() {
    let base = SyntheticSpec::academic(10, 5, 2, 4, 2, 1.0, 0);
    let mut zero = base.clone();
    zero.num_classes = 0;
    assert!(matches!(generate_synthetic(&zero), Err(Error::Config(_))));
    let mut empty = base.clone();
    empty.node_types[1].count = 0;
    assert!(matches!(generate_synthetic(&empty), Err(Error::Config(_))));
    let mut negative = base.clone();
    negative.signal = -1.0;
    assert!(matches!(generate_synthetic(&negative), Err(Error::Config(_))));
    let mut bad_reverse = base;
    bad_reverse.edge_types[1].reverse_of = Some("P-S".into());
    assert!(matches!(generate_synthetic(&bad_reverse), Err(Error::Config(_))));
}

#[test]
fn synthetic_signal_separates_class_means() {
    let g = generate_synthetic(&SyntheticSpec::academic(400, 50, 5, 4, 2, 4.0, 11)).unwrap();
    let x = g.features(0);
    let mut means = [[0.0f64; 4]; 2];
    let mut counts = [0usize; 2];
    for (i, &l) in g.labels().iter().enumerate() {
        counts[l] += 1;
        for j in 0..4 {
            means[l][j] += x[[i, j]] as f64;
        }
    }
    let dist: f64 = (0..4)
        .map(|j| (means[0][j] / counts[0] as f64 - means[1][j] / counts[1] as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!((dist - 4.0).abs() < 0.4, "{dist}");
}

/// Reads the ACM dataset from `HETGT_ACM_DIR` when available.
#[test]
fn acm_statistics_when_available() {
    let Ok(dir) = std::env::var("HETGT_ACM_DIR") else {
        eprintln!("HETGT_ACM_DIR not set; skipping ACM statistics check");
        return;
    };
    let g = load_dataset(dir).unwrap();
    let s = g.schema();
    let count = |name: &str| s.node_types()[s.node_type_index(name).unwrap()].count;
    assert_eq!((count("P"), count("A"), count("S")), (4019, 7167, 60));
    assert_eq!(g.edges(s.edge_type_index("P-A").unwrap()).len(), 13407);
    assert_eq!(s.node_types()[s.node_type_index("P").unwrap()].feature_dim, 1902);
    let sp = g.splits();
    assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (600, 300, 3119));
}

fn arb_graph() -> impl Strategy<Value = HeteroGraph> {
    (1usize..6, 1usize..6, 1usize..4, 0.0f64..3.0, 0.0f64..3.0, any::<u64>()).prop_map(|(p, a, s, d1, d2, seed)| {
        let mut spec = SyntheticSpec::academic(p.max(2) * 2, a, s, 2, 2, 1.0, seed);
        spec.edge_types[0].degree = d1;
        spec.edge_types[2].degree = d2;
        spec.train_fraction = 0.5;
        spec.val_fraction = 0.0;
        generate_synthetic(&spec).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalized_rows_are_stochastic(g in arb_graph()) {
        for k in 0..g.schema().edge_types().len() {
            let adj = normalize_adjacency::<f64>(&g, k).unwrap();
            let block = g.schema().block(g.schema().edge_types()[k].dst);
            for u in 0..g.num_nodes() {
                let s: f64 = adj.row(u).map(|(_, w)| w).sum();
                if block.contains(&u) {
                    prop_assert!((s - 1.0).abs() < 1e-12);
                } else {
                    prop_assert_eq!(adj.row(u).count(), 0);
                }
            }
        }
    }

    #[test]
    fn round_trip_identity(g in arb_graph(), binary in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let format = if binary { FeatureFormat::F32le } else { FeatureFormat::Csv };
        write_dataset(&g, dir.path(), format).unwrap();
        prop_assert_eq!(load_dataset(dir.path()).unwrap(), g);
    }

    #[test]
    fn segment_entries_count(g in arb_graph()) {
        for k in 0..g.schema().edge_types().len() {
            let seg = build_segments(&g, k).unwrap();
            let dst = g.schema().edge_types()[k].dst;
            prop_assert_eq!(seg.num_entries(), g.edges(k).len() + g.schema().node_types()[dst].count);
        }
    }

    #[test]
    fn k_hop_monotone_and_saturating(g in arb_graph(), pick in any::<prop::sample::Index>()) {
        let node = pick.index(g.num_nodes());
        let mut prev = BTreeSet::new();
        let n = g.num_nodes();
        for k in 0..=n {
            let cur = k_hop_neighborhood(&g, node, k).unwrap();
            prop_assert!(prev.is_subset(&cur));
            prev = cur;
        }
        prop_assert_eq!(k_hop_neighborhood(&g, node, n + 5).unwrap(), prev);
    }
}
