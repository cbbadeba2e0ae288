//! Dense 2-D reverse-mode differentiation.
//!
//! A [`Tape`] owns every value computed during one forward pass. Operations
//! append a node and return a [`Tensor`] handle; nodes are therefore always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Every op checks its output for NaN/Inf and fails with the op name and the
//! current scope (see [`Tape::set_scope`]) instead of letting bad values
//! propagate.

mod activation;
pub mod gradcheck;
pub mod sparse;

use std::rc::Rc;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{sorted_sum, Scalar};

pub use activation::Activation;
pub use sparse::{SegmentIndex, SparseAdjacency};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of a backward rule, used to prove that gradient
/// checks catch broken derivatives.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    /// Multiply both matmul input gradients by the given factor.
    ScaleMatmulGrad(f64),
}

/// Weights of a propagation: fixed adjacency values or a differentiable
/// per-entry tensor (attention coefficients).
#[derive(Debug, Clone)]
enum EdgeWeights<T> {
    Fixed(Arc<SparseAdjacency<T>>),
    Learned(Tensor, Arc<SegmentIndex>),
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Scale(Tensor, T),
    MulScalar(Tensor, Tensor),
    Act(Tensor, Activation),
    Dropout(Tensor, Array2<T>),
    SliceRows(Tensor, usize),
    ConcatRows(Vec<Tensor>),
    ConcatCols(Vec<Tensor>),
    Element(Tensor, usize, usize),
    Sum(Tensor),
    Mean(Tensor),
    SoftmaxRows(Tensor),
    Combine(Vec<Tensor>, Tensor),
    Propagate {
        weights: EdgeWeights<T>,
        neighbors: Tensor,
        own: Tensor,
        full: bool,
    },
    EdgeScores {
        seg: Arc<SegmentIndex>,
        dst: Tensor,
        neighbors: Tensor,
        own: Tensor,
    },
    SegmentSoftmax(Tensor, Arc<SegmentIndex>),
    CrossEntropy {
        logits: Tensor,
        rows: Arc<[usize]>,
        labels: Arc<[usize]>,
        probs: Array2<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::Act(_, a) => a.name(),
            Op::Dropout(..) => "dropout",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Element(..) => "element",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Combine(..) => "combine",
            Op::Propagate { .. } => "propagate",
            Op::EdgeScores { .. } => "edge_scores",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulScalar(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Act(a, _)
            | Op::Dropout(a, _)
            | Op::SliceRows(a, _)
            | Op::Element(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SoftmaxRows(a)
            | Op::SegmentSoftmax(a, _) => vec![*a],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::Combine(xs, w) => {
                let mut v = xs.clone();
                v.push(*w);
                v
            }
            Op::Propagate {
                weights,
                neighbors,
                own,
                ..
            } => {
                let mut v = vec![*neighbors, *own];
                if let EdgeWeights::Learned(w, _) = weights {
                    v.push(*w);
                }
                v
            }
            Op::EdgeScores {
                dst, neighbors, own, ..
            } => vec![*dst, *neighbors, *own],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Arc<Array2<T>>,
    op: Op<T>,
    requires_grad: bool,
    scope: Option<Rc<str>>,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    scope: Option<Rc<str>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scope: None,
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self { fault, ..Self::new() }
    }

    /// Labels subsequently recorded nodes (e.g. `"layer 2 / edge P-A"`).
    /// The label appears in non-finite errors and in [`Tape::consumer_scopes`].
    pub fn set_scope(&mut self, scope: Option<&str>) {
        self.scope = scope.map(Rc::from);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Array2<T>) -> Tensor {
        self.leaf(Arc::new(value), true)
    }

    /// Registers a constant leaf.
    pub fn constant(&mut self, value: Array2<T>) -> Tensor {
        self.leaf(Arc::new(value), false)
    }

    /// Registers a constant shared with the caller without copying it.
    pub fn shared(&mut self, value: Arc<Array2<T>>) -> Tensor {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Arc<Array2<T>>, requires_grad: bool) -> Tensor {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            scope: self.scope.clone(),
        });
        Tensor(self.nodes.len() - 1)
    }

    pub fn value(&self, t: Tensor) -> &Array2<T> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.value(t).dim()
    }

    /// Value of a 1×1 tensor.
    pub fn scalar(&self, t: Tensor) -> T {
        self.value(t)[[0, 0]]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Distinct scopes of the nodes that read `t` directly.
    pub fn consumer_scopes(&self, t: Tensor) -> Vec<Option<String>> {
        let mut out: Vec<Option<String>> = Vec::new();
        for node in &self.nodes[t.0 + 1..] {
            if node.op.inputs().contains(&t) {
                let s = node.scope.as_deref().map(str::to_owned);
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Result<Tensor> {
        let finite = match value.as_slice_memory_order() {
            Some(s) => s.iter().all(|v| v.is_finite()),
            None => value.iter().all(|v| v.is_finite()),
        };
        if !finite {
            return Err(Error::NonFinite {
                op: op.name(),
                scope: self.scope.as_deref().map(str::to_owned),
            });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            scope: self.scope.clone(),
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::dim("matmul", format!("{:?} · {:?}", va.dim(), vb.dim())));
        }
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a 1×n row to every row of an m×n tensor.
    pub fn add_row(&mut self, a: Tensor, row: Tensor) -> Result<Tensor> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::dim("add_row", format!("{:?} + row {:?}", va.dim(), vr.dim())));
        }
        let out = va + vr;
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Tensor, c: T) -> Result<Tensor> {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies by a 1×1 tensor.
    pub fn mul_scalar(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        if self.shape(s) != (1, 1) {
            return Err(Error::dim(
                "mul_scalar",
                format!("scalar has shape {:?}", self.shape(s)),
            ));
        }
        let out = self.value(a) * self.scalar(s);
        self.push(out, Op::MulScalar(a, s))
    }

    pub fn activation(&mut self, a: Tensor, kind: Activation) -> Result<Tensor> {
        let out = self.value(a).mapv(|x| kind.apply(x));
        self.push(out, Op::Act(a, kind))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`. `p == 0` records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask = Array2::from_shape_simple_fn(self.value(a).raw_dim(), || {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let out = self.value(a) * &mask;
        self.push(out, Op::Dropout(a, mask))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let v = self.value(a);
        if start + len > v.nrows() {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, v.nrows()),
            ));
        }
        let out = v.slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let views: Vec<ArrayView2<'_, T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::dim("concat_rows", e.to_string()))?;
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let views: Vec<ArrayView2<'_, T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::dim("concat_cols", e.to_string()))?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Element `(r, c)` as a 1×1 tensor.
    pub fn element(&mut self, a: Tensor, r: usize, c: usize) -> Result<Tensor> {
        let v = self.value(a);
        if r >= v.nrows() || c >= v.ncols() {
            return Err(Error::dim("element", format!("({r}, {c}) of {:?}", v.dim())));
        }
        let out = Array2::from_elem((1, 1), v[[r, c]]);
        self.push(out, Op::Element(a, r, c))
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let mut terms: Vec<T> = self.value(a).iter().copied().collect();
        let out = Array2::from_elem((1, 1), sorted_sum(&mut terms));
        self.push(out, Op::Sum(a))
    }

    /// Mean of all elements, summed in value order so the result does not
    /// depend on row order.
    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Structural("mean of an empty tensor".into()));
        }
        let n = T::of(v.len() as f64);
        let mut terms: Vec<T> = v.iter().copied().collect();
        let out = Array2::from_elem((1, 1), sorted_sum(&mut terms) / n);
        self.push(out, Op::Mean(a))
    }

    /// Softmax along each row, max-subtracted.
    pub fn softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|x| (x - max).exp());
            let mut terms = row.to_vec();
            let z = sorted_sum(&mut terms);
            row.mapv_inplace(|x| x / z);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `Σ_k weights[0, k] · inputs[k]`, accumulated in input order.
    pub fn combine(&mut self, inputs: &[Tensor], weights: Tensor) -> Result<Tensor> {
        let k = inputs.len();
        if k == 0 {
            return Err(Error::Structural("combine over zero inputs".into()));
        }
        if self.shape(weights) != (1, k) {
            return Err(Error::dim(
                "combine",
                format!("{k} inputs but weights {:?}", self.shape(weights)),
            ));
        }
        for &x in &inputs[1..] {
            self.same_shape("combine", inputs[0], x)?;
        }
        let w = self.value(weights);
        let mut out = self.value(inputs[0]) * w[[0, 0]];
        for (i, &x) in inputs.iter().enumerate().skip(1) {
            out.scaled_add(w[[0, i]], self.value(x));
        }
        self.push(out, Op::Combine(inputs.to_vec(), weights))
    }

    /// `y = S·x` over all rows of `S` (global output).
    pub fn spmm(&mut self, adj: &Arc<SparseAdjacency<T>>, x: Tensor) -> Result<Tensor> {
        self.propagate_fixed(adj, x, x, true)
    }

    /// Rows of the destination block of `adj`: neighbours read from
    /// `neighbors`, the self entry reads `own`. With `full` the output spans
    /// every global row instead of just the block.
    pub fn propagate_fixed(
        &mut self,
        adj: &Arc<SparseAdjacency<T>>,
        neighbors: Tensor,
        own: Tensor,
        full: bool,
    ) -> Result<Tensor> {
        self.check_node_rows("propagate", adj.n, &[neighbors, own])?;
        self.same_shape("propagate", neighbors, own)?;
        let rows = if full { 0..adj.n } else { adj.dst_block() };
        let out = sparse::propagate_rows(
            adj.pattern(),
            &adj.values,
            self.value(neighbors).view(),
            self.value(own).view(),
            rows,
        );
        self.push(
            out,
            Op::Propagate {
                weights: EdgeWeights::Fixed(adj.clone()),
                neighbors,
                own,
                full,
            },
        )
    }

    /// Attention-weighted propagation over the destination block of `seg`:
    /// `out[u] = Σ_{v≠u} α_uv · neighbors[v] + α_uu · own[u]`.
    pub fn propagate_attention(
        &mut self,
        seg: &Arc<SegmentIndex>,
        alpha: Tensor,
        neighbors: Tensor,
        own: Tensor,
    ) -> Result<Tensor> {
        self.check_node_rows("propagate_attention", seg.n, &[neighbors, own])?;
        self.same_shape("propagate_attention", neighbors, own)?;
        if self.shape(alpha) != (seg.num_entries(), 1) {
            return Err(Error::dim(
                "propagate_attention",
                format!("{} entries but weights {:?}", seg.num_entries(), self.shape(alpha)),
            ));
        }
        let w: Vec<T> = self.value(alpha).iter().copied().collect();
        let out = sparse::propagate_rows(
            seg.pattern(),
            &w,
            self.value(neighbors).view(),
            self.value(own).view(),
            seg.dst_block(),
        );
        self.push(
            out,
            Op::Propagate {
                weights: EdgeWeights::Learned(alpha, seg.clone()),
                neighbors,
                own,
                full: false,
            },
        )
    }

    /// Per-entry score `dst[u] + neighbors[v]` for `v ≠ u` and
    /// `dst[u] + own[u]` for the self entry; inputs are n×1 columns.
    pub fn edge_scores(
        &mut self,
        seg: &Arc<SegmentIndex>,
        dst: Tensor,
        neighbors: Tensor,
        own: Tensor,
    ) -> Result<Tensor> {
        for t in [dst, neighbors, own] {
            if self.shape(t) != (seg.n, 1) {
                return Err(Error::dim(
                    "edge_scores",
                    format!("expected ({}, 1), got {:?}", seg.n, self.shape(t)),
                ));
            }
        }
        let (d, nb, ow) = (self.value(dst), self.value(neighbors), self.value(own));
        let mut out = Array2::zeros((seg.num_entries(), 1));
        for (e, (u, v)) in seg.entries().enumerate() {
            let src = if u == v { ow[[u, 0]] } else { nb[[v, 0]] };
            out[[e, 0]] = d[[u, 0]] + src;
        }
        self.push(
            out,
            Op::EdgeScores {
                seg: seg.clone(),
                dst,
                neighbors,
                own,
            },
        )
    }

    /// Softmax of an entries×1 score column within each segment.
    pub fn segment_softmax(&mut self, scores: Tensor, seg: &Arc<SegmentIndex>) -> Result<Tensor> {
        if self.shape(scores) != (seg.num_entries(), 1) {
            return Err(Error::dim(
                "segment_softmax",
                format!("{} entries but scores {:?}", seg.num_entries(), self.shape(scores)),
            ));
        }
        let s: Vec<T> = self.value(scores).iter().copied().collect();
        let p = sparse::segment_softmax_values(seg.pattern(), &s, seg.dst_block())?;
        let out = Array2::from_shape_vec((p.len(), 1), p).expect("column shape");
        self.push(out, Op::SegmentSoftmax(scores, seg.clone()))
    }

    /// Mean negative log-likelihood of `labels[i]` at logits row `rows[i]`.
    pub fn cross_entropy(&mut self, logits: Tensor, rows: &[usize], labels: &[usize]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Contract("cross-entropy over an empty mask".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} rows but {} labels", rows.len(), labels.len()),
            ));
        }
        let v = self.value(logits);
        let (n, c) = v.dim();
        let mut probs = Array2::zeros((rows.len(), c));
        let mut losses = Vec::with_capacity(rows.len());
        for (i, (&r, &y)) in rows.iter().zip(labels).enumerate() {
            if r >= n || y >= c {
                return Err(Error::Contract(format!(
                    "mask row {r} or label {y} out of range for logits {n}x{c}"
                )));
            }
            let row = v.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
            let mut terms = exps.clone();
            let z = sorted_sum(&mut terms);
            for (j, e) in exps.iter_mut().enumerate() {
                probs[[i, j]] = *e / z;
            }
            losses.push(z.ln() + max - row[y]);
        }
        let m = T::of(rows.len() as f64);
        let out = Array2::from_elem((1, 1), sorted_sum(&mut losses) / m);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                rows: rows.into(),
                labels: labels.into(),
                probs,
            },
        )
    }

    fn check_node_rows(&self, op: &'static str, n: usize, ts: &[Tensor]) -> Result<()> {
        for &t in ts {
            if self.value(t).nrows() != n {
                return Err(Error::dim(
                    op,
                    format!("structure covers {n} nodes, input has {} rows", self.value(t).nrows()),
                ));
            }
        }
        Ok(())
    }

    /// Reverse sweep from a 1×1 `loss`. Gradients of shared inputs add up.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array2<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in self.input_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.zip_mut_with(&gi, |a, &b| *a = *a + b),
                    slot @ None => *slot = Some(gi),
                }
            }
            // leaves keep their gradient
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Gradient contributions of node `id` to each of its inputs.
    fn input_grads(&self, id: usize, g: &Array2<T>) -> Vec<(Tensor, Array2<T>)> {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let scale = self.fault.map(|Fault::ScaleMatmulGrad(f)| T::of(f));
                let fix = |m: Array2<T>| match scale {
                    Some(s) => m * s,
                    None => m,
                };
                if self.wants(*a) {
                    res.push((*a, fix(g.dot(&self.value(*b).t()))));
                }
                if self.wants(*b) {
                    res.push((*b, fix(self.value(*a).t().dot(g))));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    res.push((*a, g * self.value(*b)));
                }
                if self.wants(*b) {
                    res.push((*b, g * self.value(*a)));
                }
            }
            Op::AddRow(a, r) => {
                res.push((*a, g.clone()));
                if self.wants(*r) {
                    res.push((*r, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
            }
            Op::Scale(a, c) => res.push((*a, g * *c)),
            Op::MulScalar(a, s) => {
                if self.wants(*a) {
                    res.push((*a, g * self.scalar(*s)));
                }
                if self.wants(*s) {
                    let d = (g * self.value(*a)).sum();
                    res.push((*s, Array2::from_elem((1, 1), d)));
                }
            }
            Op::Act(a, kind) => {
                let x = self.value(*a);
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(x)
                    .and(&**out)
                    .for_each(|d, &x, &y| *d = *d * kind.derivative(x, y));
                res.push((*a, d));
            }
            Op::Dropout(a, mask) => res.push((*a, g * mask)),
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                res.push((*a, d));
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let r = self.value(p).nrows();
                    if self.wants(p) {
                        res.push((p, g.slice(s![at..at + r, ..]).to_owned()));
                    }
                    at += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let c = self.value(p).ncols();
                    if self.wants(p) {
                        res.push((p, g.slice(s![.., at..at + c]).to_owned()));
                    }
                    at += c;
                }
            }
            Op::Element(a, r, c) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                d[[*r, *c]] = g[[0, 0]];
                res.push((*a, d));
            }
            Op::Sum(a) => res.push((*a, Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]))),
            Op::Mean(a) => {
                let v = self.value(*a);
                let n = T::of(v.len() as f64);
                res.push((*a, Array2::from_elem(v.raw_dim(), g[[0, 0]] / n)));
            }
            Op::SoftmaxRows(a) => {
                let mut d = Array2::zeros(out.raw_dim());
                for ((mut dr, pr), gr) in d.rows_mut().into_iter().zip(out.rows()).zip(g.rows()) {
                    let inner = pr.iter().zip(gr.iter()).fold(T::zero(), |acc, (&p, &g)| acc + p * g);
                    for ((d, &p), &g) in dr.iter_mut().zip(pr.iter()).zip(gr.iter()) {
                        *d = p * (g - inner);
                    }
                }
                res.push((*a, d));
            }
            Op::Combine(inputs, w) => {
                let wv = self.value(*w);
                for (i, &x) in inputs.iter().enumerate() {
                    if self.wants(x) {
                        res.push((x, g * wv[[0, i]]));
                    }
                }
                if self.wants(*w) {
                    let d = Array2::from_shape_fn((1, inputs.len()), |(_, i)| (g * self.value(inputs[i])).sum());
                    res.push((*w, d));
                }
            }
            Op::Propagate {
                weights,
                neighbors,
                own,
                full,
            } => {
                let (pattern, wvals, rows, alpha) = match weights {
                    EdgeWeights::Fixed(adj) => {
                        let rows = if *full { 0..adj.n } else { adj.dst_block() };
                        (adj.pattern(), adj.values.clone(), rows, None)
                    }
                    EdgeWeights::Learned(a, seg) => (
                        seg.pattern(),
                        self.value(*a).iter().copied().collect(),
                        seg.dst_block(),
                        Some(*a),
                    ),
                };
                let want = (
                    self.wants(*neighbors),
                    self.wants(*own),
                    alpha.is_some_and(|a| self.wants(a)),
                );
                let (d_nb, d_own, d_w) = sparse::propagate_rows_backward(
                    pattern,
                    &wvals,
                    self.value(*neighbors).view(),
                    self.value(*own).view(),
                    rows,
                    g.view(),
                    want,
                );
                if let Some(d) = d_nb {
                    res.push((*neighbors, d));
                }
                if let Some(d) = d_own {
                    res.push((*own, d));
                }
                if let (Some(d), Some(a)) = (d_w, alpha) {
                    let n = d.len();
                    res.push((a, Array2::from_shape_vec((n, 1), d).expect("column shape")));
                }
            }
            Op::EdgeScores {
                seg,
                dst,
                neighbors,
                own,
            } => {
                let n = seg.n;
                let mut d_dst = Array2::zeros((n, 1));
                let mut d_nb = Array2::zeros((n, 1));
                let mut d_own = Array2::zeros((n, 1));
                for (e, (u, v)) in seg.entries().enumerate() {
                    let ge = g[[e, 0]];
                    d_dst[[u, 0]] = d_dst[[u, 0]] + ge;
                    if u == v {
                        d_own[[u, 0]] = d_own[[u, 0]] + ge;
                    } else {
                        d_nb[[v, 0]] = d_nb[[v, 0]] + ge;
                    }
                }
                res.push((*dst, d_dst));
                res.push((*neighbors, d_nb));
                res.push((*own, d_own));
            }
            Op::SegmentSoftmax(a, seg) => {
                let p: Vec<T> = out.iter().copied().collect();
                let gv: Vec<T> = g.iter().copied().collect();
                let d = sparse::segment_softmax_backward(seg.pattern(), &p, &gv, seg.dst_block());
                let n = d.len();
                res.push((*a, Array2::from_shape_vec((n, 1), d).expect("column shape")));
            }
            Op::CrossEntropy {
                logits,
                rows,
                labels,
                probs,
            } => {
                let scale = g[[0, 0]] / T::of(rows.len() as f64);
                let mut d = Array2::zeros(self.value(*logits).raw_dim());
                for (i, (&r, &y)) in rows.iter().zip(labels.iter()).enumerate() {
                    for j in 0..probs.ncols() {
                        let target = if j == y { T::one() } else { T::zero() };
                        d[[r, j]] = d[[r, j]] + (probs[[i, j]] - target) * scale;
                    }
                }
                res.push((*logits, d));
            }
        }
        res
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, `None` if no path from the loss reaches it.
    pub fn get(&self, t: Tensor) -> Option<&Array2<T>> {
        self.grads.get(t.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when unreachable.
    pub fn wrt(&self, tape: &Tape<T>, t: Tensor) -> Array2<T> {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(tape.value(t).raw_dim()))
    }
}

#[cfg(test)]
mod tests;
