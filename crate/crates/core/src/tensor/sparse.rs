//! CSR adjacency, attention segments, and the row kernels shared by the
//! convolution and attention layers.
//!
//! Both structures live on the global node index. Rows outside the
//! destination block of an edge type are empty, so kernels only visit
//! `dst_block` and produce block-sized outputs.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{sorted_sum, Scalar};

/// Work (entries × columns) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// Row-normalized adjacency `D̃⁻¹(A + I)` of one edge type.
///
/// Row `u` holds the in-neighbours of `u` (edge sources) plus `u` itself.
/// Values are constants: nothing differentiates through them.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency<T> {
    pub(crate) n: usize,
    pub(crate) row_ptr: Vec<usize>,
    pub(crate) col_idx: Vec<usize>,
    pub(crate) values: Vec<T>,
    pub(crate) dst_block: Range<usize>,
}

impl<T: Scalar> SparseAdjacency<T> {
    /// Builds an adjacency from raw CSR arrays over `n` global nodes,
    /// checking the structural invariants. `dst_block` is the range of rows
    /// allowed to hold entries.
    pub fn from_csr(
        n: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<T>,
        dst_block: Range<usize>,
    ) -> Result<Self> {
        check_pattern(n, &row_ptr, &col_idx, &dst_block)?;
        if values.len() != col_idx.len() {
            return Err(Error::Structural(format!(
                "{} values for {} column indices",
                values.len(),
                col_idx.len()
            )));
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
            dst_block,
        })
    }

    /// Square identity pattern: one self entry of weight 1 per row.
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![T::one(); n],
            dst_block: 0..n,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dst_block(&self) -> Range<usize> {
        self.dst_block.clone()
    }

    /// `(column, value)` pairs of row `u`.
    pub fn row(&self, u: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.row_ptr[u]..self.row_ptr[u + 1];
        self.col_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    /// Weight of the self entry of row `u`, zero if the row is empty.
    pub fn self_weight(&self, u: usize) -> T {
        self.row(u)
            .find(|&(c, _)| c == u)
            .map(|(_, v)| v)
            .unwrap_or_else(T::zero)
    }

    pub fn to_dense(&self) -> Array2<T> {
        let mut d = Array2::zeros((self.n, self.n));
        for u in 0..self.n {
            for (c, v) in self.row(u) {
                d[[u, c]] = d[[u, c]] + v;
            }
        }
        d
    }

    pub fn cast<U: Scalar>(&self) -> SparseAdjacency<U> {
        SparseAdjacency {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            dst_block: self.dst_block.clone(),
        }
    }

    pub(crate) fn pattern(&self) -> PatternRef<'_> {
        PatternRef {
            row_ptr: &self.row_ptr,
            col_idx: &self.col_idx,
        }
    }
}

/// Attention index set of one edge type: for every destination node `u`, the
/// contiguous run of entries `(u, v)` over its in-neighbours plus one self
/// entry `(u, u)`. Entries are ordered by target, then by source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentIndex {
    pub(crate) n: usize,
    pub(crate) row_ptr: Vec<usize>,
    pub(crate) col_idx: Vec<usize>,
    pub(crate) dst_block: Range<usize>,
}

impl SegmentIndex {
    pub fn from_csr(n: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>, dst_block: Range<usize>) -> Result<Self> {
        check_pattern(n, &row_ptr, &col_idx, &dst_block)?;
        for u in dst_block.clone() {
            let seg = &col_idx[row_ptr[u]..row_ptr[u + 1]];
            if seg.is_empty() {
                return Err(Error::Structural(format!("empty segment for target {u}")));
            }
            if seg.iter().filter(|&&v| v == u).count() != 1 {
                return Err(Error::Structural(format!(
                    "segment of target {u} must contain exactly one self entry"
                )));
            }
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            dst_block,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn num_entries(&self) -> usize {
        self.col_idx.len()
    }

    pub fn num_segments(&self) -> usize {
        self.dst_block.len()
    }

    pub fn dst_block(&self) -> Range<usize> {
        self.dst_block.clone()
    }

    /// Iterates `(target, sources)` per segment, in target order.
    pub fn segments(&self) -> impl Iterator<Item = (usize, &[usize])> + '_ {
        self.dst_block
            .clone()
            .map(move |u| (u, &self.col_idx[self.row_ptr[u]..self.row_ptr[u + 1]]))
    }

    /// Entry offsets delimiting each segment (length `num_segments + 1`).
    pub fn segment_offsets(&self) -> Vec<usize> {
        self.row_ptr[self.dst_block.start..=self.dst_block.end].to_vec()
    }

    /// `(target, source)` of every entry, in entry order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.segments().flat_map(|(u, srcs)| srcs.iter().map(move |&v| (u, v)))
    }

    pub(crate) fn pattern(&self) -> PatternRef<'_> {
        PatternRef {
            row_ptr: &self.row_ptr,
            col_idx: &self.col_idx,
        }
    }
}

fn check_pattern(n: usize, row_ptr: &[usize], col_idx: &[usize], dst_block: &Range<usize>) -> Result<()> {
    if row_ptr.len() != n + 1 || row_ptr[0] != 0 {
        return Err(Error::Structural(format!(
            "row_ptr must have {} entries starting at 0",
            n + 1
        )));
    }
    if *row_ptr.last().unwrap() != col_idx.len() {
        return Err(Error::Structural("row_ptr does not end at nnz".into()));
    }
    if dst_block.end > n {
        return Err(Error::Structural("destination block exceeds node count".into()));
    }
    for u in 0..n {
        let (lo, hi) = (row_ptr[u], row_ptr[u + 1]);
        if hi < lo {
            return Err(Error::Structural(format!("row_ptr decreases at row {u}")));
        }
        if hi > lo && !dst_block.contains(&u) {
            return Err(Error::Structural(format!(
                "row {u} outside destination block has entries"
            )));
        }
        let row = &col_idx[lo..hi];
        if row.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Structural(format!("columns of row {u} not strictly increasing")));
        }
        if row.last().is_some_and(|&c| c >= n) {
            return Err(Error::Structural(format!("column out of range in row {u}")));
        }
    }
    Ok(())
}

/// Borrowed CSR pattern used by kernels.
#[derive(Clone, Copy)]
pub(crate) struct PatternRef<'a> {
    pub row_ptr: &'a [usize],
    pub col_idx: &'a [usize],
}

impl PatternRef<'_> {
    fn range(&self, u: usize) -> Range<usize> {
        self.row_ptr[u]..self.row_ptr[u + 1]
    }
}

/// `out[u - rows.start] = Σ_e w_e · src_e` over the entries of each row in
/// `rows`, where `src_e` is `own[u]` for the self entry and `neighbors[v]`
/// otherwise. Every output element is summed in value order so the result is
/// independent of node numbering.
pub(crate) fn propagate_rows<T: Scalar>(
    pattern: PatternRef<'_>,
    weights: &[T],
    neighbors: ArrayView2<'_, T>,
    own: ArrayView2<'_, T>,
    rows: Range<usize>,
) -> Array2<T> {
    let f = neighbors.ncols();
    let mut out = Array2::<T>::zeros((rows.len(), f));
    if f == 0 || rows.is_empty() {
        return out;
    }
    let work = (pattern.row_ptr[rows.end] - pattern.row_ptr[rows.start]) * f;
    let source = |u: usize, v: usize| if v == u { own.row(u) } else { neighbors.row(v) };
    // Entries are summed in an order fixed by their content (weight, then
    // source row), never by node id. Entries that compare equal contribute
    // identical terms, so the result is invariant under node relabeling.
    let fill = |scratch: &mut Vec<usize>, r: usize, out_row: &mut [T]| {
        let u = rows.start + r;
        scratch.clear();
        scratch.extend(pattern.range(u));
        scratch.sort_unstable_by(|&a, &b| {
            weights[a].total_cmp(&weights[b]).then_with(|| {
                let (ra, rb) = (source(u, pattern.col_idx[a]), source(u, pattern.col_idx[b]));
                ra.iter()
                    .zip(rb.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        for &e in scratch.iter() {
            let w = weights[e];
            let src = source(u, pattern.col_idx[e]);
            for (o, &x) in out_row.iter_mut().zip(src.iter()) {
                *o = *o + w * x;
            }
        }
    };
    let buf = out.as_slice_mut().expect("fresh array is contiguous");
    if work >= PAR_THRESHOLD {
        buf.par_chunks_mut(f)
            .enumerate()
            .for_each_init(Vec::new, |scratch, (r, row)| fill(scratch, r, row));
    } else {
        let mut scratch = Vec::new();
        for (r, row) in buf.chunks_mut(f).enumerate() {
            fill(&mut scratch, r, row);
        }
    }
    out
}

/// `(d_neighbors, d_own, d_weights)`, each present only if requested.
pub(crate) type PropagateGrads<T> = (Option<Array2<T>>, Option<Array2<T>>, Option<Vec<T>>);

/// Gradients of [`propagate_rows`] with respect to its inputs.
pub(crate) fn propagate_rows_backward<T: Scalar>(
    pattern: PatternRef<'_>,
    weights: &[T],
    neighbors: ArrayView2<'_, T>,
    own: ArrayView2<'_, T>,
    rows: Range<usize>,
    grad_out: ArrayView2<'_, T>,
    want: (bool, bool, bool),
) -> PropagateGrads<T> {
    let (want_nb, want_own, want_w) = want;
    let mut d_nb = want_nb.then(|| Array2::<T>::zeros(neighbors.raw_dim()));
    let mut d_own = want_own.then(|| Array2::<T>::zeros(own.raw_dim()));
    let mut d_w = want_w.then(|| vec![T::zero(); weights.len()]);
    for (r, u) in rows.clone().enumerate() {
        let g = grad_out.row(r);
        for e in pattern.range(u) {
            let v = pattern.col_idx[e];
            let w = weights[e];
            if v == u {
                if let Some(d) = d_own.as_mut() {
                    d.row_mut(u).scaled_add(w, &g);
                }
                if let Some(dw) = d_w.as_mut() {
                    dw[e] = dot(g, own.row(u));
                }
            } else {
                if let Some(d) = d_nb.as_mut() {
                    d.row_mut(v).scaled_add(w, &g);
                }
                if let Some(dw) = d_w.as_mut() {
                    dw[e] = dot(g, neighbors.row(v));
                }
            }
        }
    }
    (d_nb, d_own, d_w)
}

fn dot<T: Scalar>(a: ndarray::ArrayView1<'_, T>, b: ndarray::ArrayView1<'_, T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Per-entry softmax within each row of `pattern` over `rows`. Entries of rows
/// outside `rows` are left at zero.
pub(crate) fn segment_softmax_values<T: Scalar>(
    pattern: PatternRef<'_>,
    scores: &[T],
    rows: Range<usize>,
) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); scores.len()];
    let mut scratch = Vec::new();
    for u in rows {
        let range = pattern.range(u);
        if range.is_empty() {
            return Err(Error::Structural(format!("empty softmax segment at target {u}")));
        }
        let seg = &scores[range.clone()];
        let max = seg.iter().copied().fold(T::neg_infinity(), T::max);
        scratch.clear();
        scratch.extend(seg.iter().map(|&s| (s - max).exp()));
        let exps = scratch.clone();
        let z = sorted_sum(&mut scratch);
        for (o, e) in out[range].iter_mut().zip(exps) {
            *o = e / z;
        }
    }
    Ok(out)
}

pub(crate) fn segment_softmax_backward<T: Scalar>(
    pattern: PatternRef<'_>,
    probs: &[T],
    grad_out: &[T],
    rows: Range<usize>,
) -> Vec<T> {
    let mut d = vec![T::zero(); probs.len()];
    for u in rows {
        let range = pattern.range(u);
        let inner = range.clone().fold(T::zero(), |acc, e| acc + probs[e] * grad_out[e]);
        for e in range {
            d[e] = probs[e] * (grad_out[e] - inner);
        }
    }
    d
}
