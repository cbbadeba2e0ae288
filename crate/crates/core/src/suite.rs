//! Finite-difference gradient checks over every tape op and every model
//! family, run in f64 with dropout off.

use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::fixture::{academic_small, paper_author};
use crate::graph::{build_segments, normalize_adjacency, HeteroGraph};
use crate::model::{init_params, record, Aggregator, Mode, ModelKind, ModelSpec, PreparedGraph};
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::tensor::{Activation, Fault, Tape, Tensor};

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Corrupts a backward rule so the suite can be shown to fail.
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

impl SuiteCase {
    fn new(name: impl Into<String>, report: GradCheckReport) -> Self {
        Self {
            name: name.into(),
            passed: report.max_rel_error <= GRADCHECK_THRESHOLD,
            max_rel_error: report.max_rel_error,
            coords_checked: report.coords_checked,
        }
    }
}

/// Every op case followed by every model case.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<SuiteCase>> {
    let mut cases = op_cases(opts)?;
    cases.extend(model_cases(opts)?);
    Ok(cases)
}

fn grad_opts(opts: &SuiteOptions) -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-6,
        max_coords_per_param: 24,
        seed: opts.seed,
        fault: opts.fault,
    }
}

/// Values in ±[0.1, 1.5], away from activation kinks.
fn kink_free(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ y ⊙ R` with fixed random `R`, so every output element receives a
/// distinct upstream gradient.
fn reduce(t: &mut Tape<f64>, y: Tensor) -> Result<Tensor> {
    let (r, c) = t.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = t.constant(kink_free(&mut rng, r, c));
    let p = t.mul(y, w)?;
    t.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>>;

/// One case per differentiable op on the tape.
pub fn op_cases(opts: &SuiteOptions) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut m = |r, c| kink_free(&mut rng, r, c);
    let g = paper_author();
    let adj = Arc::new(normalize_adjacency::<f64>(&g, 0)?);
    let seg = Arc::new(build_segments(&g, 0)?);
    let n = g.num_nodes();
    let entries = seg.num_entries();
    let (seg2, adj2) = (seg.clone(), adj.clone());
    let (seg3, seg4) = (seg.clone(), seg.clone());

    let mut cases: Vec<(String, Vec<Array2<f64>>, OpFn)> = vec![
        (
            "matmul".into(),
            vec![m(3, 4), m(4, 2)],
            Box::new(|t, p| t.matmul(p[0], p[1])),
        ),
        ("add".into(), vec![m(3, 2), m(3, 2)], Box::new(|t, p| t.add(p[0], p[1]))),
        ("mul".into(), vec![m(3, 2), m(3, 2)], Box::new(|t, p| t.mul(p[0], p[1]))),
        (
            "add_row".into(),
            vec![m(3, 2), m(1, 2)],
            Box::new(|t, p| t.add_row(p[0], p[1])),
        ),
        ("scale".into(), vec![m(2, 3)], Box::new(|t, p| t.scale(p[0], -1.7))),
        (
            "mul_scalar".into(),
            vec![m(2, 3), m(1, 1)],
            Box::new(|t, p| t.mul_scalar(p[0], p[1])),
        ),
        (
            "dropout".into(),
            vec![m(4, 3)],
            Box::new(|t, p| t.dropout(p[0], 0.5, &mut ChaCha8Rng::seed_from_u64(3))),
        ),
        (
            "slice_rows".into(),
            vec![m(4, 2)],
            Box::new(|t, p| t.slice_rows(p[0], 1, 2)),
        ),
        (
            "concat_rows".into(),
            vec![m(1, 2), m(3, 2)],
            Box::new(|t, p| t.concat_rows(p)),
        ),
        (
            "concat_cols".into(),
            vec![m(2, 1), m(2, 3)],
            Box::new(|t, p| t.concat_cols(p)),
        ),
        ("element".into(), vec![m(2, 3)], Box::new(|t, p| t.element(p[0], 1, 2))),
        ("sum".into(), vec![m(2, 3)], Box::new(|t, p| t.sum(p[0]))),
        ("mean".into(), vec![m(2, 3)], Box::new(|t, p| t.mean(p[0]))),
        (
            "softmax_rows".into(),
            vec![m(3, 4)],
            Box::new(|t, p| t.softmax_rows(p[0])),
        ),
        (
            "combine".into(),
            vec![m(2, 3), m(2, 3), m(1, 2)],
            Box::new(|t, p| t.combine(&p[..2], p[2])),
        ),
        ("spmm".into(), vec![m(n, 2)], Box::new(move |t, p| t.spmm(&adj, p[0]))),
        (
            "propagate".into(),
            vec![m(n, 2), m(n, 2)],
            Box::new(move |t, p| t.propagate_fixed(&adj2, p[0], p[1], false)),
        ),
        (
            "propagate_attention".into(),
            vec![m(entries, 1), m(n, 2), m(n, 2)],
            Box::new(move |t, p| t.propagate_attention(&seg2, p[0], p[1], p[2])),
        ),
        (
            "edge_scores".into(),
            vec![m(n, 1), m(n, 1), m(n, 1)],
            Box::new(move |t, p| t.edge_scores(&seg3, p[0], p[1], p[2])),
        ),
        (
            "segment_softmax".into(),
            vec![m(entries, 1)],
            Box::new(move |t, p| t.segment_softmax(p[0], &seg4)),
        ),
        (
            "cross_entropy".into(),
            vec![m(4, 3)],
            Box::new(|t, p| t.cross_entropy(p[0], &[0, 2, 3], &[2, 0, 1])),
        ),
    ];
    for act in [
        Activation::Identity,
        Activation::Relu,
        Activation::LeakyRelu(0.2),
        Activation::Elu,
        Activation::Tanh,
        Activation::Sigmoid,
    ] {
        cases.push((
            format!("activation {}", act.name()),
            vec![m(3, 3)],
            Box::new(move |t, p| t.activation(p[0], act)),
        ));
    }

    let go = grad_opts(opts);
    cases
        .into_iter()
        .map(|(name, params, f)| {
            let report = grad_check(&params, &go, |t, p| {
                let y = f(t, p)?;
                reduce(t, y)
            })?;
            Ok(SuiteCase::new(name, report))
        })
        .collect()
}

/// Every model family, and every aggregator of HetGTCN, on the two-type
/// fixture and the three-type synthetic graph.
pub fn model_cases(opts: &SuiteOptions) -> Result<Vec<SuiteCase>> {
    let graphs = [
        ("paper_author", paper_author()),
        ("academic_small", academic_small(opts.seed)),
    ];
    let mut specs: Vec<ModelSpec> = ModelKind::ALL.iter().map(|&k| small_spec(k)).collect();
    for agg in [Aggregator::Mean, Aggregator::WeightedSum] {
        specs.push(small_spec(ModelKind::HetGtcn).with_aggregator(agg));
    }
    let mut out = Vec::new();
    for (gname, g) in &graphs {
        for spec in &specs {
            let name = format!("{} ({}) on {gname}", spec.kind, spec.effective_aggregator());
            out.push(SuiteCase::new(name, model_check(spec, g, opts)?));
        }
    }
    Ok(out)
}

fn small_spec(kind: ModelKind) -> ModelSpec {
    let mut spec = ModelSpec::new(kind, 2, 4);
    spec.semantic_hidden = 4;
    spec
}

/// Gradient of the labelled-node cross-entropy with respect to every
/// parameter. Zero-initialized biases are replaced by random values so
/// that no coordinate starts at a symmetric point.
pub fn model_check(spec: &ModelSpec, g: &HeteroGraph, opts: &SuiteOptions) -> Result<GradCheckReport> {
    let prepared = PreparedGraph::<f64>::new(g)?;
    let params = init_params::<f64>(spec, g.schema(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xb1a5);
    let names: Vec<String> = params.iter().map(|(k, _)| k.to_string()).collect();
    let values: Vec<Array2<f64>> = params
        .iter()
        .map(|(name, v)| {
            if name.ends_with("/bias") {
                v.mapv(|_| rng.random_range(-0.3..0.3))
            } else {
                v.clone()
            }
        })
        .collect();
    let splits = g.splits();
    let rows: Vec<usize> = splits.train.iter().chain(&splits.val).copied().collect();
    let labels: Vec<usize> = rows.iter().map(|&r| g.labels()[r]).collect();
    grad_check(&values, &grad_opts(opts), |t, leaves| {
        let map: IndexMap<String, Tensor> = names.iter().cloned().zip(leaves.iter().copied()).collect();
        let (logits, _, _) = record(t, spec, &map, &prepared, Mode::Eval)?;
        t.cross_entropy(logits, &rows, &labels)
    })
}
