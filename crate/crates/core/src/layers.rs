//! Per-layer building blocks recorded on a [`Tape`].
//!
//! Edge-type layers return only the rows of their destination node type
//! (`n_dst × f`), in global-index order within that block. Rows of other
//! types would be zero and are never materialized.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Activation, SegmentIndex, SparseAdjacency, Tape, Tensor};

/// Negative slope of the LeakyReLU applied to attention scores.
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Projection weights of one node type: `weight` is `d_a × f`, `bias` `1 × f`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Semantic attention head of one node type in one layer: `weight` is
/// `f × f′`, `bias` `1 × f′`, `query` `f′ × 1`.
#[derive(Debug, Clone, Copy)]
pub struct SemanticHead {
    pub weight: Tensor,
    pub bias: Tensor,
    pub query: Tensor,
}

/// Attention-weight dropout; `rate == 0` disables it.
pub struct AttentionDropout<'a, R: ?Sized> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// `Z` over the global index: block `a` is `σ(X_a W₀_a + b₀_a)`.
pub fn project_features<T: Scalar>(
    tape: &mut Tape<T>,
    features: &[Tensor],
    proj: &[Linear],
    act: Activation,
) -> Result<Tensor> {
    if features.len() != proj.len() {
        return Err(Error::dim(
            "project_features",
            format!("{} feature blocks but {} projections", features.len(), proj.len()),
        ));
    }
    let mut width = None;
    let mut blocks = Vec::with_capacity(features.len());
    for (&x, p) in features.iter().zip(proj) {
        let f = tape.shape(p.weight).1;
        if *width.get_or_insert(f) != f {
            return Err(Error::dim("project_features", "node types project to different widths"));
        }
        let y = tape.matmul(x, p.weight)?;
        let y = tape.add_row(y, p.bias)?;
        blocks.push(tape.activation(y, act)?);
    }
    tape.concat_rows(&blocks)
}

/// GTCN edge layer: `H_k[u] = Σ_{v∈N_u} Â_uv H[v] + Â_uu Z[u]`.
pub fn gtcn_edge<T: Scalar>(tape: &mut Tape<T>, h: Tensor, z: Tensor, adj: &Arc<SparseAdjacency<T>>) -> Result<Tensor> {
    tape.propagate_fixed(adj, h, z, false)
}

fn split_attention<T: Scalar>(tape: &mut Tape<T>, a: Tensor, f: usize) -> Result<(Tensor, Tensor)> {
    if tape.shape(a) != (2 * f, 1) {
        return Err(Error::dim(
            "attention",
            format!("attention vector {:?} for width {f}", tape.shape(a)),
        ));
    }
    Ok((tape.slice_rows(a, 0, f)?, tape.slice_rows(a, f, f)?))
}

fn attention_from_scores<T: Scalar>(tape: &mut Tape<T>, scores: Tensor, seg: &Arc<SegmentIndex>) -> Result<Tensor> {
    let scores = tape.activation(scores, Activation::LeakyRelu(ATTENTION_SLOPE))?;
    tape.segment_softmax(scores, seg)
}

/// GTAN attention weights, one per segment entry: softmax over
/// `LeakyReLU([Z_u ∥ H_v]·a)`, with `Z_u` as the key of the self entry.
pub fn gtan_attention<T: Scalar>(
    tape: &mut Tape<T>,
    h: Tensor,
    z: Tensor,
    a: Tensor,
    seg: &Arc<SegmentIndex>,
) -> Result<Tensor> {
    let (a1, a2) = split_attention(tape, a, tape.shape(z).1)?;
    let query = tape.matmul(z, a1)?;
    let key_nb = tape.matmul(h, a2)?;
    let key_own = tape.matmul(z, a2)?;
    let scores = tape.edge_scores(seg, query, key_nb, key_own)?;
    attention_from_scores(tape, scores, seg)
}

/// GTAN edge layer: `ELU(Σ_{v≠u} α_uv H_v + α_uu Z_u)`.
pub fn gtan_edge<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    h: Tensor,
    z: Tensor,
    a: Tensor,
    seg: &Arc<SegmentIndex>,
    dropout: AttentionDropout<'_, R>,
) -> Result<Tensor> {
    let pre = gtan_message(tape, h, z, a, seg, dropout)?;
    tape.activation(pre, Activation::Elu)
}

/// GTAN propagation before its ELU; the no-semantic variant sums these
/// across edge types inside a single ELU.
pub fn gtan_message<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    h: Tensor,
    z: Tensor,
    a: Tensor,
    seg: &Arc<SegmentIndex>,
    dropout: AttentionDropout<'_, R>,
) -> Result<Tensor> {
    let alpha = gtan_attention(tape, h, z, a, seg)?;
    let alpha = tape.dropout(alpha, dropout.rate, dropout.rng)?;
    tape.propagate_attention(seg, alpha, h, z)
}

/// GCN edge layer on a precomputed `HW = H·W` (W shared across edge types
/// of a layer): `H_k[u] = Σ_{v∈N_u∪{u}} Â_uv (HW)[v]`.
pub fn gcn_edge<T: Scalar>(tape: &mut Tape<T>, hw: Tensor, adj: &Arc<SparseAdjacency<T>>) -> Result<Tensor> {
    tape.propagate_fixed(adj, hw, hw, false)
}

/// GAT attention weights on `HW`: softmax over `LeakyReLU([HW_u ∥ HW_v]·a)`.
pub fn gat_attention<T: Scalar>(tape: &mut Tape<T>, hw: Tensor, a: Tensor, seg: &Arc<SegmentIndex>) -> Result<Tensor> {
    let (a1, a2) = split_attention(tape, a, tape.shape(hw).1)?;
    let query = tape.matmul(hw, a1)?;
    let key = tape.matmul(hw, a2)?;
    let scores = tape.edge_scores(seg, query, key, key)?;
    attention_from_scores(tape, scores, seg)
}

/// GAT edge layer on a precomputed `HW`: `ELU(Σ_{v∈N_u∪{u}} α_uv (HW)_v)`.
pub fn gat_edge<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    hw: Tensor,
    a: Tensor,
    seg: &Arc<SegmentIndex>,
    dropout: AttentionDropout<'_, R>,
) -> Result<Tensor> {
    let alpha = gat_attention(tape, hw, a, seg)?;
    let alpha = tape.dropout(alpha, dropout.rate, dropout.rng)?;
    let out = tape.propagate_attention(seg, alpha, hw, hw)?;
    tape.activation(out, Activation::Elu)
}

/// Edge-type importances `β` (1 × K): softmax over
/// `w_k = mean_u tanh(H_k[u] W + b) · q`.
pub fn semantic_weights<T: Scalar>(tape: &mut Tape<T>, inputs: &[Tensor], head: &SemanticHead) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::Structural("semantic attention over zero edge types".into()));
    }
    let mut scores = Vec::with_capacity(inputs.len());
    for &hk in inputs {
        if tape.shape(hk).0 == 0 {
            return Err(Error::Structural("semantic attention over an empty node type".into()));
        }
        let s = tape.matmul(hk, head.weight)?;
        let s = tape.add_row(s, head.bias)?;
        let s = tape.activation(s, Activation::Tanh)?;
        let s = tape.matmul(s, head.query)?;
        scores.push(tape.mean(s)?);
    }
    let w = tape.concat_cols(&scores)?;
    tape.softmax_rows(w)
}

/// `Σ_k β_k H_k` with `β` from [`semantic_weights`].
pub fn semantic_aggregate<T: Scalar>(tape: &mut Tape<T>, inputs: &[Tensor], head: &SemanticHead) -> Result<Tensor> {
    let beta = semantic_weights(tape, inputs, head)?;
    tape.combine(inputs, beta)
}

/// Elementwise mean over edge types.
pub fn mean_aggregate<T: Scalar>(tape: &mut Tape<T>, inputs: &[Tensor]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::Structural("mean over zero edge types".into()));
    }
    let k = inputs.len();
    let w = tape.constant(ndarray::Array2::from_elem((1, k), T::one() / T::of(k as f64)));
    tape.combine(inputs, w)
}

/// `Σ_k θ_k H_k` with unconstrained `θ` (1 × K).
pub fn weighted_sum_aggregate<T: Scalar>(tape: &mut Tape<T>, inputs: &[Tensor], theta: Tensor) -> Result<Tensor> {
    tape.combine(inputs, theta)
}

/// `H W_out + b_out`; class probabilities come from the loss-side softmax.
pub fn output_head<T: Scalar>(tape: &mut Tape<T>, h: Tensor, head: &Linear) -> Result<Tensor> {
    let y = tape.matmul(h, head.weight)?;
    tape.add_row(y, head.bias)
}
