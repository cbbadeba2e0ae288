use std::sync::Arc;

use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, GradCheckOptions};
use super::*;

/// Plain triple loop, independent of ndarray's kernel.
fn reference_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = b.ncols();
    let mut out = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[[i, p]] * b[[p, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-scale..scale))
}

/// Random CSR pattern over `n` nodes whose destination block is
/// `lo..hi`; every block row has a self entry plus random extra columns.
fn random_pattern(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize, density: f64) -> (Vec<usize>, Vec<usize>) {
    let mut row_ptr = vec![0];
    let mut col_idx = Vec::new();
    for u in 0..n {
        if (lo..hi).contains(&u) {
            for v in 0..n {
                if v == u || rng.random::<f64>() < density {
                    col_idx.push(v);
                }
            }
        }
        row_ptr.push(col_idx.len());
    }
    (row_ptr, col_idx)
}

fn random_adjacency(rng: &mut ChaCha8Rng, n: usize, density: f64) -> SparseAdjacency<f64> {
    let lo = rng.random_range(0..n);
    let hi = rng.random_range(lo..=n);
    let (row_ptr, col_idx) = random_pattern(rng, n, lo, hi, density);
    let values = (0..col_idx.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
    SparseAdjacency::from_csr(n, row_ptr, col_idx, values, lo..hi).unwrap()
}

fn random_segments(rng: &mut ChaCha8Rng, n: usize, density: f64) -> SegmentIndex {
    let lo = rng.random_range(0..n);
    let hi = rng.random_range(lo + 1..=n);
    let (row_ptr, col_idx) = random_pattern(rng, n, lo, hi, density);
    SegmentIndex::from_csr(n, row_ptr, col_idx, lo..hi).unwrap()
}

#[test]
fn matmul_examples() {
    let mut t = Tape::<f64>::new();
    let i2 = t.constant(Array2::eye(2));
    let m = t.constant(array![[5.0, 6.0], [7.0, 8.0]]);
    let y = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(y), &array![[5.0, 6.0], [7.0, 8.0]]);

    let a = array![[1.0, 2.0], [3.0, 4.0]];
    let b = array![[1.0], [1.0]];
    let expected = reference_matmul(&a, &b);
    assert_eq!(expected, array![[3.0], [7.0]]);
    let (ta, tb) = (t.constant(a), t.constant(b));
    let y = t.matmul(ta, tb).unwrap();
    assert_eq!(t.value(y), &expected);

    let z = t.constant(Array2::<f64>::zeros((2, 3)));
    let any = t.constant(array![[1.0], [-4.0], [9.0]]);
    let y = t.matmul(z, any).unwrap();
    assert_eq!(t.value(y), &Array2::<f64>::zeros((2, 1)));
}

#[test]
fn matmul_agrees_with_reference_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (m, k, n) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let a = random_matrix(&mut rng, m, k, 3.0);
        let b = random_matrix(&mut rng, k, n, 3.0);
        let mut t = Tape::new();
        let (ta, tb) = (t.constant(a.clone()), t.constant(b.clone()));
        let y = t.matmul(ta, tb).unwrap();
        let r = reference_matmul(&a, &b);
        assert!(t.value(y).iter().zip(r.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Array2::zeros((2, 3)));
    let b = t.constant(Array2::zeros((2, 3)));
    assert!(matches!(t.matmul(a, b), Err(Error::Dimension { op: "matmul", .. })));
}

#[test]
fn non_finite_output_is_reported_with_scope() {
    let mut t = Tape::<f64>::new();
    t.set_scope(Some("layer 1 / edge P-A"));
    let a = t.constant(array![[1e308]]);
    let err = t.scale(a, 10.0).unwrap_err();
    let msg = err.to_string();
    assert!(err.is_numerical());
    assert!(msg.contains("scale") && msg.contains("layer 1 / edge P-A"), "{msg}");
}

fn segment_of(sizes: &[usize]) -> Arc<SegmentIndex> {
    // targets 0..k; target i owns itself plus (sizes[i] - 1) nodes after the block
    let k = sizes.len();
    let extra: usize = sizes.iter().map(|s| s - 1).sum();
    let n = k + extra;
    let mut row_ptr = vec![0];
    let mut col_idx = Vec::new();
    let mut next = k;
    for (u, &s) in sizes.iter().enumerate() {
        col_idx.push(u);
        for _ in 1..s {
            col_idx.push(next);
            next += 1;
        }
        row_ptr.push(col_idx.len());
    }
    row_ptr.resize(n + 1, col_idx.len());
    Arc::new(SegmentIndex::from_csr(n, row_ptr, col_idx, 0..k).unwrap())
}

#[test]
fn segment_softmax_examples() {
    let mut t = Tape::<f64>::new();
    let seg = segment_of(&[3]);
    let s = t.constant(array![[0.0], [0.0], [0.0]]);
    let p = t.segment_softmax(s, &seg).unwrap();
    for &v in t.value(p) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let seg = segment_of(&[2]);
    let s = t.constant(array![[2f64.ln()], [0.0]]);
    let p = t.segment_softmax(s, &seg).unwrap();
    let v = t.value(p);
    assert!((v[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
    assert!((v[[1, 0]] - 1.0 / 3.0).abs() < 1e-15);

    let seg = segment_of(&[2, 1]);
    let s = t.constant(array![[0.0], [0.0], [5.0]]);
    let p = t.segment_softmax(s, &seg).unwrap();
    assert_eq!(t.value(p), &array![[0.5], [0.5], [1.0]]);

    let bad = t.constant(array![[0.0], [0.0]]);
    assert!(t.segment_softmax(bad, &seg).is_err());
}

#[test]
fn segment_softmax_handles_large_logits() {
    let mut t = Tape::<f32>::new();
    let seg = Arc::new(SegmentIndex::from_csr(2, vec![0, 2, 2], vec![0, 1], 0..1).unwrap());
    let s = t.constant(array![[1000.0f32], [999.0]]);
    let p = t.segment_softmax(s, &seg).unwrap();
    let v = t.value(p);
    assert!((v[[0, 0]] + v[[1, 0]] - 1.0).abs() < 1e-6);
}

#[test]
fn spmm_examples() {
    let mut t = Tape::<f64>::new();
    let id = Arc::new(SparseAdjacency::identity(3));
    let x = t.constant(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
    let y = t.spmm(&id, x).unwrap();
    assert_eq!(t.value(y), t.value(x));

    // row 1 empty
    let s = Arc::new(SparseAdjacency::from_csr(3, vec![0, 1, 1, 3], vec![2, 0, 1], vec![2.0, 1.0, 1.0], 0..3).unwrap());
    let y = t.spmm(&s, x).unwrap();
    assert_eq!(t.value(y), &array![[10.0, 12.0], [0.0, 0.0], [4.0, 6.0]]);

    let wrong = t.constant(Array2::zeros((4, 2)));
    assert!(matches!(t.spmm(&s, wrong), Err(Error::Dimension { .. })));
}

#[test]
fn spmm_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..30 {
        let n = rng.random_range(1..60);
        let adj = Arc::new(random_adjacency(&mut rng, n, 0.2));
        let cols = rng.random_range(1..6);
        let x = random_matrix(&mut rng, n, cols, 5.0);
        let dense = reference_matmul(&adj.to_dense(), &x);
        let mut t = Tape::new();
        let tx = t.constant(x);
        let y = t.spmm(&adj, tx).unwrap();
        for (a, b) in t.value(y).iter().zip(dense.iter()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn backward_examples() {
    // constant in w
    let mut t = Tape::<f64>::new();
    let w = t.param(array![[1.0, 2.0]]);
    let x = t.param(array![[3.0]]);
    let y = t.scale(x, 2.0).unwrap();
    let loss = t.sum(y).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(&t, w), array![[0.0, 0.0]]);
    assert!(g.get(w).is_none());

    // y = A·x + A·x doubles x.grad
    let a = array![[1.0, 2.0], [3.0, 4.0]];
    let x0 = array![[0.5], [-1.0]];
    let single = {
        let mut t = Tape::new();
        let ta = t.constant(a.clone());
        let tx = t.param(x0.clone());
        let y = t.matmul(ta, tx).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap().wrt(&t, tx)
    };
    let double = {
        let mut t = Tape::new();
        let ta = t.constant(a.clone());
        let tx = t.param(x0.clone());
        let y1 = t.matmul(ta, tx).unwrap();
        let y2 = t.matmul(ta, tx).unwrap();
        let y = t.add(y1, y2).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap().wrt(&t, tx)
    };
    assert_eq!(double, &single * 2.0);
    assert_eq!(single, array![[4.0], [6.0]]);
}

#[test]
fn backward_needs_scalar_loss() {
    let mut t = Tape::<f64>::new();
    let x = t.param(array![[1.0, 2.0]]);
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn tanh_matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_matrix(&mut rng, 4, 3, 1.0);
    let x = random_matrix(&mut rng, 3, 2, 1.0);
    let r = grad_check(&[w, x], &GradCheckOptions::default(), |t, p| {
        let y = t.matmul(p[0], p[1])?;
        let y = t.activation(y, Activation::Tanh)?;
        t.sum(y)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let adj = Arc::new(random_adjacency(&mut rng, 40, 0.3));
    let x = random_matrix(&mut rng, 40, 8, 1.0);
    let w = random_matrix(&mut rng, 8, 8, 1.0);
    let run = || {
        let mut t = Tape::new();
        let tx = t.param(x.clone());
        let tw = t.param(w.clone());
        let h = t.matmul(tx, tw).unwrap();
        let h = t.spmm(&adj, h).unwrap();
        let h = t.activation(h, Activation::Elu).unwrap();
        let l = t.sum(h).unwrap();
        let g = t.backward(l).unwrap();
        (g.wrt(&t, tx), g.wrt(&t, tw))
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
}

/// `Σ (op(...) ⊙ R)` with a fixed random `R`, so every output element gets a
/// distinct upstream gradient.
fn weighted_sum(t: &mut Tape<f64>, y: Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = t.shape(y);
    let w = t.constant(random_matrix(&mut rng, r, c, 1.0));
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check(params: &[Array2<f64>], f: impl Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>) {
    let r = grad_check(params, &GradCheckOptions::default(), |t, p| {
        let y = f(t, p)?;
        weighted_sum(t, y, 99)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

/// Random values bounded away from activation kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || {
        let m = rng.random_range(0.1..2.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_matrix(&mut rng, 4, 3, 1.0);
    let b = random_matrix(&mut rng, 4, 3, 1.0);
    let row = random_matrix(&mut rng, 1, 3, 1.0);
    let k = away_from_zero(&mut rng, 4, 3);

    check(&[a.clone(), b.clone()], |t, p| t.add(p[0], p[1]));
    check(&[a.clone(), b.clone()], |t, p| t.mul(p[0], p[1]));
    check(&[a.clone(), row.clone()], |t, p| t.add_row(p[0], p[1]));
    check(std::slice::from_ref(&a), |t, p| t.scale(p[0], -1.5));
    check(&[a.clone(), array![[0.7]]], |t, p| t.mul_scalar(p[0], p[1]));
    for act in [
        Activation::Identity,
        Activation::Relu,
        Activation::LeakyRelu(0.2),
        Activation::Elu,
        Activation::Tanh,
        Activation::Sigmoid,
    ] {
        check(std::slice::from_ref(&k), move |t, p| t.activation(p[0], act));
    }
    check(std::slice::from_ref(&a), |t, p| t.slice_rows(p[0], 1, 2));
    check(&[a.clone(), b.clone()], |t, p| t.concat_rows(&[p[0], p[1]]));
    check(&[a.clone(), b.clone()], |t, p| t.concat_cols(&[p[0], p[1]]));
    check(std::slice::from_ref(&a), |t, p| t.element(p[0], 2, 1));
    check(std::slice::from_ref(&a), |t, p| t.mean(p[0]));
    check(std::slice::from_ref(&a), |t, p| t.softmax_rows(p[0]));
    check(&[a.clone(), b.clone(), array![[0.3, -1.2]]], |t, p| {
        t.combine(&[p[0], p[1]], p[2])
    });

    let adj = Arc::new(random_adjacency(&mut rng, 6, 0.4));
    let x = random_matrix(&mut rng, 6, 3, 1.0);
    let z = random_matrix(&mut rng, 6, 3, 1.0);
    check(std::slice::from_ref(&x), |t, p| t.spmm(&adj, p[0]));
    check(&[x.clone(), z.clone()], |t, p| {
        t.propagate_fixed(&adj, p[0], p[1], false)
    });

    let seg = Arc::new(random_segments(&mut rng, 6, 0.4));
    let e = seg.num_entries();
    let alpha = random_matrix(&mut rng, e, 1, 1.0);
    check(&[alpha.clone(), x.clone(), z.clone()], |t, p| {
        t.propagate_attention(&seg, p[0], p[1], p[2])
    });
    let cols: Vec<Array2<f64>> = (0..3).map(|_| random_matrix(&mut rng, 6, 1, 1.0)).collect();
    check(&cols, |t, p| t.edge_scores(&seg, p[0], p[1], p[2]));
    check(std::slice::from_ref(&alpha), |t, p| t.segment_softmax(p[0], &seg));

    let logits = random_matrix(&mut rng, 5, 3, 2.0);
    let r = grad_check(&[logits], &GradCheckOptions::default(), |t, p| {
        t.cross_entropy(p[0], &[0, 2, 4], &[1, 0, 2])
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn dropout_is_inverted_and_differentiable() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut t = Tape::<f64>::new();
    let x = t.param(Array2::ones((200, 50)));
    let y = t.dropout(x, 0.5, &mut rng).unwrap();
    let v = t.value(y);
    assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
    let mean = v.mean().unwrap();
    assert!((mean - 1.0).abs() < 0.05, "{mean}");
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap().wrt(&t, x);
    assert_eq!(&g, t.value(y));

    let same = t.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(same, x);
    assert!(t.dropout(x, 1.0, &mut rng).is_err());
}

#[test]
fn cross_entropy_reference_values() {
    let mut t = Tape::<f64>::new();
    let l = t.constant(Array2::zeros((2, 4)));
    let ce = t.cross_entropy(l, &[0, 1], &[3, 0]).unwrap();
    assert!((t.scalar(ce) - 4f64.ln()).abs() < 1e-15);

    let l = t.constant(array![[1.0, 0.0]]);
    let ce = t.cross_entropy(l, &[0], &[0]).unwrap();
    let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((t.scalar(ce) - expected).abs() < 1e-15);
    assert!((expected - 0.3133).abs() < 1e-4);

    let l = t.constant(array![[50.0, 0.0, 0.0]]);
    let ce = t.cross_entropy(l, &[0], &[0]).unwrap();
    assert!(t.scalar(ce) < 1e-9);

    assert!(matches!(t.cross_entropy(l, &[], &[]), Err(Error::Contract(_))));
}

#[test]
fn consumer_scopes_track_layers() {
    let mut t = Tape::<f64>::new();
    let z = t.param(array![[1.0]]);
    t.set_scope(Some("layer 1"));
    let a = t.scale(z, 2.0).unwrap();
    t.set_scope(Some("layer 2"));
    let _ = t.add(a, z).unwrap();
    let _ = t.add(a, z).unwrap();
    assert_eq!(
        t.consumer_scopes(z),
        vec![Some("layer 1".to_string()), Some("layer 2".to_string())]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segment_softmax_is_normalized(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seg = Arc::new(random_segments(&mut rng, n, 0.3));
        let scores = Array2::from_shape_simple_fn((seg.num_entries(), 1), || rng.random_range(-50.0..50.0));
        let mut t = Tape::<f64>::new();
        let s = t.constant(scores);
        let p = t.segment_softmax(s, &seg).unwrap();
        let v = t.value(p);
        for (_, range) in seg.segment_offsets().windows(2).map(|w| ((), w[0]..w[1])) {
            let total: f64 = range.clone().map(|e| v[[e, 0]]).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(range.clone().all(|e| v[[e, 0]] >= 0.0));
        }
    }

    #[test]
    fn spmm_equals_dense_product(seed in any::<u64>(), n in 1usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adj = Arc::new(random_adjacency(&mut rng, n, 0.1));
        let x = random_matrix(&mut rng, n, 3, 1.0);
        let dense = reference_matmul(&adj.to_dense(), &x);
        let mut t = Tape::new();
        let tx = t.constant(x);
        let y = t.spmm(&adj, tx).unwrap();
        for (a, b) in t.value(y).iter().zip(dense.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
