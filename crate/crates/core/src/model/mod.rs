//! Full models: HetGTCN, HetGTAN and its no-semantic variant, plus the
//! HetGCN and HetGAT baselines.
//!
//! Every model projects each node type to a shared width `f`, runs `depth`
//! rounds of edge-type propagation followed by per-node-type aggregation,
//! and reads logits off the target type with a linear head.
//!
//! Tree models keep the projected features `Z` as the self term of every
//! round; convolutional models use the previous hidden state instead.
//!
//! Parameter names:
//!
//! | name | shape |
//! |---|---|
//! | `proj/{node type}/weight`, `/bias` | `d_a × f`, `1 × f` |
//! | `layer{t}/attn/{edge type}` | `2f × 1` |
//! | `layer{t}/transform` | `f × f` |
//! | `layer{t}/semantic/{node type}/weight`, `/bias`, `/query` | `f × f′`, `1 × f′`, `f′ × 1` |
//! | `layer{t}/theta/{node type}` | `1 × K_a` |
//! | `out/{target type}/weight`, `/bias` | `f × C`, `1 × C` |
//!
//! Layers are numbered `t = 1..=depth` in evaluation order.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_segments, normalize_adjacency, HeteroGraph, Schema};
use crate::layers::{self, AttentionDropout, Linear, SemanticHead};
use crate::scalar::Scalar;
use crate::tensor::{Activation, SegmentIndex, SparseAdjacency, Tape, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "HetGTCN")]
    HetGtcn,
    #[serde(rename = "HetGTAN")]
    HetGtan,
    #[serde(rename = "HetGTAN_ns")]
    HetGtanNs,
    #[serde(rename = "HetGCN")]
    HetGcn,
    #[serde(rename = "HetGAT")]
    HetGat,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::HetGtcn,
        ModelKind::HetGtan,
        ModelKind::HetGtanNs,
        ModelKind::HetGcn,
        ModelKind::HetGat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::HetGtcn => "HetGTCN",
            ModelKind::HetGtan => "HetGTAN",
            ModelKind::HetGtanNs => "HetGTAN_ns",
            ModelKind::HetGcn => "HetGCN",
            ModelKind::HetGat => "HetGAT",
        }
    }

    /// Self term anchored at `Z` in every round.
    pub fn is_tree(self) -> bool {
        matches!(self, ModelKind::HetGtcn | ModelKind::HetGtan | ModelKind::HetGtanNs)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, ModelKind::HetGtan | ModelKind::HetGtanNs | ModelKind::HetGat)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Semantic,
    Mean,
    WeightedSum,
    /// Direct sum inside one ELU; only meaningful for HetGTAN_ns.
    None,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Semantic => "semantic",
            Aggregator::Mean => "mean",
            Aggregator::WeightedSum => "weighted_sum",
            Aggregator::None => "none",
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutRates {
    /// Applied to the projected features `Z`.
    pub projection: f64,
    /// Applied to the output of every layer except the last.
    pub layer: f64,
    /// Applied to attention weights.
    pub attention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_semantic_hidden")]
    pub semantic_hidden: usize,
    #[serde(default)]
    pub aggregator: Aggregator,
    #[serde(default)]
    pub dropout: DropoutRates,
    #[serde(default = "default_projection_activation")]
    pub projection_activation: Activation,
}

fn default_depth() -> usize {
    2
}

fn default_hidden() -> usize {
    64
}

fn default_semantic_hidden() -> usize {
    128
}

fn default_projection_activation() -> Activation {
    Activation::Elu
}

impl ModelSpec {
    pub fn new(kind: ModelKind, depth: usize, hidden: usize) -> Self {
        Self {
            kind,
            depth,
            hidden,
            semantic_hidden: default_semantic_hidden(),
            aggregator: if kind == ModelKind::HetGtanNs {
                Aggregator::None
            } else {
                Aggregator::Semantic
            },
            dropout: DropoutRates::default(),
            projection_activation: default_projection_activation(),
        }
    }

    pub fn with_aggregator(mut self, aggregator: Aggregator) -> Self {
        self.aggregator = aggregator;
        self
    }

    /// Aggregator actually used: HetGTAN_ns always sums inside one ELU.
    pub fn effective_aggregator(&self) -> Aggregator {
        if self.kind == ModelKind::HetGtanNs {
            Aggregator::None
        } else {
            self.aggregator
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("model depth must be at least 1".into()));
        }
        if self.hidden == 0 || self.semantic_hidden == 0 {
            return Err(Error::Config("hidden widths must be at least 1".into()));
        }
        if self.kind != ModelKind::HetGtanNs && self.aggregator == Aggregator::None {
            return Err(Error::Config(format!(
                "aggregator `none` is only defined for HetGTAN_ns, not {}",
                self.kind
            )));
        }
        let d = &self.dropout;
        for (name, p) in [
            ("projection", d.projection),
            ("layer", d.layer),
            ("attention", d.attention),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Named parameter matrices in a stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    values: IndexMap<String, Array2<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_map(values: IndexMap<String, Array2<T>>) -> Self {
        Self { values }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.values.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<T>)> {
        self.values.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Array2::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            values: self
                .values
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::of(x.as_f64()))))
                .collect(),
        }
    }

    pub fn into_map(self) -> IndexMap<String, Array2<T>> {
        self.values
    }

    /// Checks names, order and shapes against [`param_shapes`].
    pub fn check(&self, spec: &ModelSpec, schema: &Schema) -> Result<()> {
        let expected = param_shapes(spec, schema)?;
        if expected.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "model needs {} parameters, got {}",
                expected.len(),
                self.values.len()
            )));
        }
        for ((name, shape), (have, value)) in expected.iter().zip(&self.values) {
            if name != have || *shape != value.dim() {
                return Err(Error::Contract(format!(
                    "parameter `{have}` {:?} does not match expected `{name}` {shape:?}",
                    value.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Names and shapes of every parameter, in initialization order.
pub fn param_shapes(spec: &ModelSpec, schema: &Schema) -> Result<IndexMap<String, (usize, usize)>> {
    spec.validate()?;
    let f = spec.hidden;
    let fs = spec.semantic_hidden;
    let mut out = IndexMap::new();
    for nt in schema.node_types() {
        out.insert(format!("proj/{}/weight", nt.name), (nt.feature_dim, f));
        out.insert(format!("proj/{}/bias", nt.name), (1, f));
    }
    for t in 1..=spec.depth {
        if spec.kind.uses_attention() {
            for et in schema.edge_types() {
                out.insert(format!("layer{t}/attn/{}", et.name), (2 * f, 1));
            }
        }
        if !spec.kind.is_tree() {
            out.insert(format!("layer{t}/transform"), (f, f));
        }
        for (a, nt) in schema.node_types().iter().enumerate() {
            let k = schema.incoming(a).len();
            if k == 0 {
                continue;
            }
            match spec.effective_aggregator() {
                Aggregator::Semantic => {
                    out.insert(format!("layer{t}/semantic/{}/weight", nt.name), (f, fs));
                    out.insert(format!("layer{t}/semantic/{}/bias", nt.name), (1, fs));
                    out.insert(format!("layer{t}/semantic/{}/query", nt.name), (fs, 1));
                }
                Aggregator::WeightedSum => {
                    out.insert(format!("layer{t}/theta/{}", nt.name), (1, k));
                }
                Aggregator::Mean | Aggregator::None => {}
            }
        }
    }
    let target = &schema.node_types()[schema.target_type()].name;
    out.insert(format!("out/{target}/weight"), (f, schema.num_classes()));
    out.insert(format!("out/{target}/bias"), (1, schema.num_classes()));
    Ok(out)
}

fn is_zero_init(name: &str) -> bool {
    name.ends_with("/bias")
}

/// Glorot-uniform weights and attention vectors, zero biases, `θ = 1/K_a`.
pub fn init_params<T: Scalar>(spec: &ModelSpec, schema: &Schema, seed: u64) -> Result<ModelParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = IndexMap::new();
    for (name, (r, c)) in param_shapes(spec, schema)? {
        let value = if is_zero_init(&name) {
            Array2::zeros((r, c))
        } else if name.contains("/theta/") {
            Array2::from_elem((r, c), T::one() / T::of(c as f64))
        } else {
            let bound = glorot_bound(r, c);
            Array2::from_shape_simple_fn((r, c), || T::of(rng.random_range(-bound..=bound)))
        };
        values.insert(name, value);
    }
    Ok(ModelParams { values })
}

/// `√(6 / (fan_in + fan_out))` for an `r × c` matrix.
pub fn glorot_bound(r: usize, c: usize) -> f64 {
    (6.0 / (r + c) as f64).sqrt()
}

/// Graph structures converted once for repeated forward passes.
#[derive(Debug, Clone)]
pub struct PreparedGraph<T> {
    schema: Schema,
    features: Vec<Arc<Array2<T>>>,
    adjacency: Vec<Arc<SparseAdjacency<T>>>,
    segments: Vec<Arc<SegmentIndex>>,
}

impl<T: Scalar> PreparedGraph<T> {
    pub fn new(g: &HeteroGraph) -> Result<Self> {
        let k = g.schema().edge_types().len();
        Ok(Self {
            schema: g.schema().clone(),
            features: g
                .all_features()
                .iter()
                .map(|x| Arc::new(x.mapv(|v| T::of(v as f64))))
                .collect(),
            adjacency: (0..k)
                .map(|e| normalize_adjacency(g, e).map(Arc::new))
                .collect::<Result<_>>()?,
            segments: (0..k)
                .map(|e| build_segments(g, e).map(Arc::new))
                .collect::<Result<_>>()?,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout on, masks drawn from `seed`.
    Train {
        seed: u64,
    },
    Eval,
}

/// A recorded forward pass.
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    /// Target-type rows × classes.
    pub logits: Tensor,
    /// Leaf of every parameter, by name.
    pub params: IndexMap<String, Tensor>,
    /// Projected features over the global index (before dropout).
    pub z: Tensor,
    /// Global hidden state after each layer.
    pub hidden: Vec<Tensor>,
}

struct Dropouts {
    rng: ChaCha8Rng,
    rates: DropoutRates,
}

/// Records the model on a fresh tape. Fails with a numerical error naming
/// the layer and edge type if any activation becomes non-finite.
pub fn forward<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    graph: &PreparedGraph<T>,
    mode: Mode,
) -> Result<ForwardPass<T>> {
    params.check(spec, &graph.schema)?;
    let mut tape = Tape::new();
    let leaves: IndexMap<String, Tensor> = params
        .values
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(v.clone())))
        .collect();
    let (logits, z, hidden) = record(&mut tape, spec, &leaves, graph, mode)?;
    Ok(ForwardPass {
        tape,
        logits,
        params: leaves,
        z,
        hidden,
    })
}

/// Records the model onto `tape` using caller-owned parameter tensors, keyed
/// as in [`param_shapes`]. Returns `(logits, z, hidden)`.
pub fn record<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &ModelSpec,
    leaves: &IndexMap<String, Tensor>,
    graph: &PreparedGraph<T>,
    mode: Mode,
) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
    spec.validate()?;
    let schema = &graph.schema;
    for (name, &shape) in &param_shapes(spec, schema)? {
        match leaves.get(name) {
            Some(&t) if tape.shape(t) == shape => {}
            Some(&t) => {
                return Err(Error::Contract(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    tape.shape(t)
                )))
            }
            None => return Err(Error::Contract(format!("missing parameter `{name}`"))),
        }
    }
    let p = |name: String| leaves[&name];
    let mut drop = match mode {
        Mode::Train { seed } => Dropouts {
            rng: ChaCha8Rng::seed_from_u64(seed),
            rates: spec.dropout,
        },
        Mode::Eval => Dropouts {
            rng: ChaCha8Rng::seed_from_u64(0),
            rates: DropoutRates::default(),
        },
    };

    tape.set_scope(Some("projection"));
    let xs: Vec<Tensor> = graph.features.iter().map(|x| tape.shared(x.clone())).collect();
    let proj: Vec<Linear> = schema
        .node_types()
        .iter()
        .map(|nt| Linear {
            weight: p(format!("proj/{}/weight", nt.name)),
            bias: p(format!("proj/{}/bias", nt.name)),
        })
        .collect();
    let z = layers::project_features(tape, &xs, &proj, spec.projection_activation)?;
    let z_in = tape.dropout(z, drop.rates.projection, &mut drop.rng)?;

    let mut h = z_in;
    let mut hidden = Vec::with_capacity(spec.depth);
    for t in 1..=spec.depth {
        let hw = if spec.kind.is_tree() {
            None
        } else {
            tape.set_scope(Some(&format!("layer {t} / transform")));
            Some(tape.matmul(h, p(format!("layer{t}/transform")))?)
        };
        let mut blocks = Vec::with_capacity(schema.node_types().len());
        for (a, nt) in schema.node_types().iter().enumerate() {
            let block = schema.block(a);
            let incoming = schema.incoming(a);
            if incoming.is_empty() {
                tape.set_scope(Some(&format!("layer {t} / carry {}", nt.name)));
                blocks.push(tape.slice_rows(h, block.start, block.len())?);
                continue;
            }
            let mut parts = Vec::with_capacity(incoming.len());
            for &k in &incoming {
                let et = &schema.edge_types()[k];
                tape.set_scope(Some(&format!("layer {t} / edge {}", et.name)));
                let att = AttentionDropout {
                    rate: drop.rates.attention,
                    rng: &mut drop.rng,
                };
                let part = match spec.kind {
                    ModelKind::HetGtcn => layers::gtcn_edge(tape, h, z_in, &graph.adjacency[k])?,
                    ModelKind::HetGtan => {
                        let a = p(format!("layer{t}/attn/{}", et.name));
                        layers::gtan_edge(tape, h, z_in, a, &graph.segments[k], att)?
                    }
                    ModelKind::HetGtanNs => {
                        let a = p(format!("layer{t}/attn/{}", et.name));
                        layers::gtan_message(tape, h, z_in, a, &graph.segments[k], att)?
                    }
                    ModelKind::HetGcn => layers::gcn_edge(tape, hw.unwrap(), &graph.adjacency[k])?,
                    ModelKind::HetGat => {
                        let a = p(format!("layer{t}/attn/{}", et.name));
                        layers::gat_edge(tape, hw.unwrap(), a, &graph.segments[k], att)?
                    }
                };
                parts.push(part);
            }
            tape.set_scope(Some(&format!("layer {t} / aggregate {}", nt.name)));
            let mut out = match spec.effective_aggregator() {
                Aggregator::Semantic => {
                    let head = SemanticHead {
                        weight: p(format!("layer{t}/semantic/{}/weight", nt.name)),
                        bias: p(format!("layer{t}/semantic/{}/bias", nt.name)),
                        query: p(format!("layer{t}/semantic/{}/query", nt.name)),
                    };
                    layers::semantic_aggregate(tape, &parts, &head)?
                }
                Aggregator::Mean => layers::mean_aggregate(tape, &parts)?,
                Aggregator::WeightedSum => {
                    let theta = p(format!("layer{t}/theta/{}", nt.name));
                    layers::weighted_sum_aggregate(tape, &parts, theta)?
                }
                Aggregator::None => {
                    let ones = tape.constant(Array2::ones((1, parts.len())));
                    let sum = tape.combine(&parts, ones)?;
                    tape.activation(sum, Activation::Elu)?
                }
            };
            if !spec.kind.is_tree() {
                out = tape.activation(out, Activation::Relu)?;
            }
            blocks.push(out);
        }
        tape.set_scope(Some(&format!("layer {t}")));
        let mut next = tape.concat_rows(&blocks)?;
        if t < spec.depth {
            next = tape.dropout(next, drop.rates.layer, &mut drop.rng)?;
        }
        hidden.push(next);
        h = next;
    }

    tape.set_scope(Some("output"));
    let target = schema.target_type();
    let tname = &schema.node_types()[target].name;
    let block = schema.block(target);
    let h_target = tape.slice_rows(h, block.start, block.len())?;
    let head = Linear {
        weight: p(format!("out/{tname}/weight")),
        bias: p(format!("out/{tname}/bias")),
    };
    let logits = layers::output_head(tape, h_target, &head)?;
    tape.set_scope(None);
    Ok((logits, z, hidden))
}

/// Eval-mode logits as a plain matrix.
pub fn predict<T: Scalar>(spec: &ModelSpec, params: &ModelParams<T>, graph: &PreparedGraph<T>) -> Result<Array2<T>> {
    let pass = forward(spec, params, graph, Mode::Eval)?;
    Ok(pass.tape.value(pass.logits).clone())
}

/// Max absolute change of `target`'s logits after adding `delta` to every
/// raw feature of `perturb` (both global ids), in eval mode.
pub fn receptive_field_probe<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    graph: &HeteroGraph,
    target: usize,
    perturb: usize,
    delta: f64,
) -> Result<f64> {
    let schema = graph.schema();
    let (tt, local) = schema
        .locate(target)
        .ok_or_else(|| Error::Contract(format!("target node {target} out of range")))?;
    if tt != schema.target_type() {
        return Err(Error::Contract(format!("node {target} is not of the target type")));
    }
    let (pt, plocal) = schema
        .locate(perturb)
        .ok_or_else(|| Error::Contract(format!("perturbed node {perturb} out of range")))?;
    let base = predict(spec, params, &PreparedGraph::new(graph)?)?;
    let mut x = graph.features(pt).clone();
    x.row_mut(plocal).mapv_inplace(|v| (v as f64 + delta) as f32);
    let moved = graph.with_features(pt, x)?;
    let after = predict(spec, params, &PreparedGraph::new(&moved)?)?;
    Ok(base
        .row(local)
        .iter()
        .zip(after.row(local))
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .fold(0.0, f64::max))
}

/// Per-layer scope labels that consume `t` (deduplicated, sorted).
pub fn consuming_layers<T: Scalar>(tape: &Tape<T>, t: Tensor) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for scope in tape.consumer_scopes(t).into_iter().flatten() {
        let layer = scope.split(" / ").next().unwrap_or(&scope).to_string();
        *out.entry(layer).or_insert(0) += 1;
    }
    out
}
