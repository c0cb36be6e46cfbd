//! Differentiable building blocks: GCN and GIN layers, plain MLPs, and the
//! receiver's inference head. All parameters are dense f64 matrices; every
//! forward pass runs on a [`Tape`] so gradients come from the reverse sweep.

use crate::autodiff::{Tape, VarId};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Backbone family for the node-feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Gcn,
    Gin,
}

/// Fully-connected layer: `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

/// Tape handles for one bound [`Linear`].
#[derive(Clone, Copy)]
pub struct LinearBound {
    pub weight: VarId,
    pub bias: VarId,
}

impl Linear {
    /// Glorot-uniform weights, zero bias, deterministic under `seed`.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight =
            Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        Linear { weight, bias: Array2::zeros((1, fan_out)) }
    }

    pub fn bind(&self, tape: &mut Tape) -> LinearBound {
        LinearBound {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// `x W + b` on the tape.
pub fn linear_forward(tape: &mut Tape, x: VarId, layer: &LinearBound) -> VarId {
    let xw = tape.matmul(x, layer.weight);
    tape.add_bias(xw, layer.bias)
}

/// Symmetric GCN propagation matrix with self-loops:
/// `D^{-1/2} (A + I) D^{-1/2}`.
pub fn gcn_propagation(adjacency: &Array2<f64>) -> Array2<f64> {
    let m = adjacency.nrows();
    let mut a_hat = adjacency.clone();
    for i in 0..m {
        a_hat[(i, i)] += 1.0;
    }
    let deg_inv_sqrt: Vec<f64> =
        (0..m).map(|i| 1.0 / a_hat.row(i).sum().sqrt()).collect();
    let mut out = a_hat;
    for i in 0..m {
        for j in 0..m {
            out[(i, j)] *= deg_inv_sqrt[i] * deg_inv_sqrt[j];
        }
    }
    out
}

/// One GCN layer: `ReLU(propagation * H * W + b)` where `propagation` is the
/// precomputed normalized adjacency registered as a constant.
pub fn gcn_layer_forward(
    tape: &mut Tape,
    propagation: VarId,
    h: VarId,
    layer: &LinearBound,
) -> VarId {
    let agg = tape.matmul(propagation, h);
    let lin = linear_forward(tape, agg, layer);
    tape.relu(lin)
}

/// Spec-level entry point taking the raw adjacency. Validates shapes and
/// normalizes internally; training code precomputes the propagation matrix
/// instead.
pub fn gcn_forward(
    tape: &mut Tape,
    adjacency: &Array2<f64>,
    h: VarId,
    layer: &LinearBound,
) -> Result<VarId, ModelError> {
    let m = adjacency.nrows();
    if adjacency.ncols() != m {
        return Err(ModelError::Shape(format!(
            "adjacency must be square, got {:?}",
            adjacency.dim()
        )));
    }
    if tape.value(h).nrows() != m {
        return Err(ModelError::Shape(format!(
            "feature rows {} != node count {m}",
            tape.value(h).nrows()
        )));
    }
    if tape.value(h).ncols() != tape.value(layer.weight).nrows() {
        return Err(ModelError::Shape(format!(
            "feature dim {} != weight rows {}",
            tape.value(h).ncols(),
            tape.value(layer.weight).nrows()
        )));
    }
    let prop = tape.leaf(gcn_propagation(adjacency));
    Ok(gcn_layer_forward(tape, prop, h, layer))
}

/// GIN layer: two-layer MLP applied to `(1 + eps) h_v + sum of neighbors`,
/// with a trainable scalar `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct GinLayer {
    pub mlp1: Linear,
    pub mlp2: Linear,
    /// Trainable scalar, stored 1x1, initialized to zero.
    pub epsilon: Array2<f64>,
}

#[derive(Clone, Copy)]
pub struct GinBound {
    pub mlp1: LinearBound,
    pub mlp2: LinearBound,
    pub epsilon: VarId,
}

impl GinLayer {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        GinLayer {
            mlp1: Linear::init(fan_in, fan_out, rng),
            mlp2: Linear::init(fan_out, fan_out, rng),
            epsilon: Array2::zeros((1, 1)),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> GinBound {
        GinBound {
            mlp1: self.mlp1.bind(tape),
            mlp2: self.mlp2.bind(tape),
            epsilon: tape.leaf(self.epsilon.clone()),
        }
    }
}

/// One GIN layer over a constant adjacency node.
pub fn gin_layer_forward(tape: &mut Tape, adjacency: VarId, h: VarId, layer: &GinBound) -> VarId {
    let neighbor_sum = tape.matmul(adjacency, h);
    let one_plus_eps = tape.offset(layer.epsilon, 1.0);
    let self_term = tape.scalar_mul(one_plus_eps, h);
    let z = tape.add(neighbor_sum, self_term);
    let hidden = linear_forward(tape, z, &layer.mlp1);
    let hidden = tape.relu(hidden);
    linear_forward(tape, hidden, &layer.mlp2)
}

/// Spec-level GIN entry point with shape validation.
pub fn gin_forward(
    tape: &mut Tape,
    adjacency: &Array2<f64>,
    h: VarId,
    layer: &GinBound,
) -> Result<VarId, ModelError> {
    let m = adjacency.nrows();
    if adjacency.ncols() != m || tape.value(h).nrows() != m {
        return Err(ModelError::Shape(format!(
            "adjacency {:?} vs features {:?}",
            adjacency.dim(),
            tape.value(h).dim()
        )));
    }
    let adj = tape.leaf(adjacency.clone());
    Ok(gin_layer_forward(tape, adj, h, layer))
}

/// One layer of the node-feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub enum GnnLayer {
    Gcn(Linear),
    Gin(GinLayer),
}

pub enum GnnLayerBound {
    Gcn(LinearBound),
    Gin(GinBound),
}

/// Two-layer GNN stack shared by the extractor and the statistics network.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnStack {
    pub layers: Vec<GnnLayer>,
}

pub struct GnnStackBound {
    pub layers: Vec<GnnLayerBound>,
}

impl GnnStack {
    pub fn init(
        kind: BackboneKind,
        feature_dim: usize,
        hidden_dim: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut d_in = feature_dim;
        for _ in 0..depth {
            layers.push(match kind {
                BackboneKind::Gcn => GnnLayer::Gcn(Linear::init(d_in, hidden_dim, rng)),
                BackboneKind::Gin => GnnLayer::Gin(GinLayer::init(d_in, hidden_dim, rng)),
            });
            d_in = hidden_dim;
        }
        GnnStack { layers }
    }

    pub fn bind(&self, tape: &mut Tape) -> GnnStackBound {
        GnnStackBound {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    GnnLayer::Gcn(lin) => GnnLayerBound::Gcn(lin.bind(tape)),
                    GnnLayer::Gin(gin) => GnnLayerBound::Gin(gin.bind(tape)),
                })
                .collect(),
        }
    }
}

/// Run the stack over one graph. `propagation` is the normalized adjacency
/// (GCN) and `adjacency` the raw one (GIN); both are constant nodes.
pub fn gnn_stack_forward(
    tape: &mut Tape,
    propagation: VarId,
    adjacency: VarId,
    features: VarId,
    stack: &GnnStackBound,
) -> VarId {
    let mut h = features;
    for layer in &stack.layers {
        h = match layer {
            GnnLayerBound::Gcn(lin) => gcn_layer_forward(tape, propagation, h, lin),
            GnnLayerBound::Gin(gin) => gin_layer_forward(tape, adjacency, h, gin),
        };
    }
    h
}

/// Plain MLP with ReLU between layers (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

pub struct MlpBound {
    pub layers: Vec<LinearBound>,
}

impl Mlp {
    pub fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2, "MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpBound {
        MlpBound { layers: self.layers.iter().map(|l| l.bind(tape)).collect() }
    }
}

pub fn mlp_forward(tape: &mut Tape, x: VarId, mlp: &MlpBound) -> VarId {
    let mut h = x;
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = linear_forward(tape, h, layer);
        if i + 1 < mlp.layers.len() {
            h = tape.relu(h);
        }
    }
    h
}

/// The receiver: fully-connected, dropout, fully-connected, log-softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

pub struct InferenceHeadBound {
    pub fc1: LinearBound,
    pub fc2: LinearBound,
}

impl InferenceHead {
    pub fn init(dim: usize, class_n: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        InferenceHead {
            fc1: Linear::init(dim, dim, rng),
            fc2: Linear::init(dim, class_n, rng),
            dropout,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> InferenceHeadBound {
        InferenceHeadBound { fc1: self.fc1.bind(tape), fc2: self.fc2.bind(tape) }
    }
}

/// Inverted-dropout mask with keep probability `1 - rate`; entries are
/// `0` or `1/(1-rate)` so the expected activation is unchanged.
pub fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rate: f64) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.random_range(0.0..1.0) < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

/// Class log-probabilities for one received representation (single row).
/// `mask` carries the dropout realization during training; pass `None` in
/// evaluation mode for a deterministic forward.
pub fn inference_head_forward(
    tape: &mut Tape,
    x: VarId,
    head: &InferenceHeadBound,
    mask: Option<&Array2<f64>>,
) -> VarId {
    let mut h = linear_forward(tape, x, &head.fc1);
    if let Some(mask) = mask {
        let mask_node = tape.leaf(mask.clone());
        h = tape.mul(h, mask_node);
    }
    let logits = linear_forward(tape, h, &head.fc2);
    tape.log_softmax_rows(logits)
}

// ---------------------------------------------------------------------------
// Parameter enumeration and checkpoints
// ---------------------------------------------------------------------------

/// Named views over a component's parameters, in a stable order.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>));

    fn named(&self, prefix: &str) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, value| out.push((name, value.clone())));
        out
    }
}

impl ParamSet for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl ParamSet for GinLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.mlp1.visit(&format!("{prefix}.mlp1"), f);
        self.mlp2.visit(&format!("{prefix}.mlp2"), f);
        f(format!("{prefix}.epsilon"), &self.epsilon);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.mlp1.visit_mut(&format!("{prefix}.mlp1"), f);
        self.mlp2.visit_mut(&format!("{prefix}.mlp2"), f);
        f(format!("{prefix}.epsilon"), &mut self.epsilon);
    }
}

impl ParamSet for GnnStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                GnnLayer::Gcn(lin) => lin.visit(&format!("{prefix}.layer{i}"), f),
                GnnLayer::Gin(gin) => gin.visit(&format!("{prefix}.layer{i}"), f),
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                GnnLayer::Gcn(lin) => lin.visit_mut(&format!("{prefix}.layer{i}"), f),
                GnnLayer::Gin(gin) => gin.visit_mut(&format!("{prefix}.layer{i}"), f),
            }
        }
    }
}

impl ParamSet for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.fc{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.fc{i}"), f);
        }
    }
}

impl ParamSet for InferenceHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

/// Shape-tagged f64 array, the checkpoint unit.
#[derive(Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// A named map of arrays, serialized as one JSON document with sorted keys.
#[derive(Serialize, Deserialize, Default)]
pub struct ParamArchive {
    pub format: String,
    pub entries: BTreeMap<String, ArchiveEntry>,
}

pub const ARCHIVE_FORMAT: &str = "gib-params-v1";

impl ParamArchive {
    pub fn new() -> Self {
        ParamArchive { format: ARCHIVE_FORMAT.to_string(), entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: String, value: &Array2<f64>) {
        self.entries.insert(
            name,
            ArchiveEntry {
                shape: [value.nrows(), value.ncols()],
                data: value.iter().copied().collect(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<Array2<f64>, ModelError> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing entry '{name}'")))?;
        Array2::from_shape_vec((entry.shape[0], entry.shape[1]), entry.data.clone())
            .map_err(|e| ModelError::Checkpoint(format!("entry '{name}': {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_string(self)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let json = std::fs::read_to_string(path)?;
        let archive: ParamArchive =
            serde_json::from_str(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if archive.format != ARCHIVE_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format '{}'",
                archive.format
            )));
        }
        Ok(archive)
    }

    pub fn store_params<P: ParamSet>(&mut self, prefix: &str, params: &P) {
        params.visit(prefix, &mut |name, value| {
            self.entries.insert(
                name,
                ArchiveEntry {
                    shape: [value.nrows(), value.ncols()],
                    data: value.iter().copied().collect(),
                },
            );
        });
    }

    pub fn load_params<P: ParamSet>(&self, prefix: &str, params: &mut P) -> Result<(), ModelError> {
        let mut result = Ok(());
        params.visit_mut(prefix, &mut |name, value| {
            if result.is_err() {
                return;
            }
            match self.get(&name) {
                Ok(loaded) => {
                    if loaded.dim() != value.dim() {
                        result = Err(ModelError::Checkpoint(format!(
                            "entry '{name}': shape {:?} != {:?}",
                            loaded.dim(),
                            value.dim()
                        )));
                    } else {
                        *value = loaded;
                    }
                }
                Err(e) => result = Err(e),
            }
        });
        result
    }
}

/// Fresh deterministic RNG for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Bound-node id lists and mutable parameter lists, in matching order, so
// the optimizer can zip gradients with parameters after a backward sweep.

impl LinearBound {
    pub fn ids(&self) -> Vec<VarId> {
        vec![self.weight, self.bias]
    }
}

impl GinBound {
    pub fn ids(&self) -> Vec<VarId> {
        let mut ids = self.mlp1.ids();
        ids.extend(self.mlp2.ids());
        ids.push(self.epsilon);
        ids
    }
}

impl GnnStackBound {
    pub fn ids(&self) -> Vec<VarId> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                GnnLayerBound::Gcn(lin) => lin.ids(),
                GnnLayerBound::Gin(gin) => gin.ids(),
            })
            .collect()
    }
}

impl MlpBound {
    pub fn ids(&self) -> Vec<VarId> {
        self.layers.iter().flat_map(LinearBound::ids).collect()
    }
}

impl InferenceHeadBound {
    pub fn ids(&self) -> Vec<VarId> {
        let mut ids = self.fc1.ids();
        ids.extend(self.fc2.ids());
        ids
    }
}

impl Linear {
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl GinLayer {
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p = self.mlp1.params_mut();
        p.extend(self.mlp2.params_mut());
        p.push(&mut self.epsilon);
        p
    }
}

impl GnnStack {
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                GnnLayer::Gcn(lin) => lin.params_mut(),
                GnnLayer::Gin(gin) => gin.params_mut(),
            })
            .collect()
    }
}

impl Mlp {
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers.iter_mut().flat_map(Linear::params_mut).collect()
    }
}

impl InferenceHead {
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p
    }
}

/// A graph prepared for network passes: raw and normalized adjacency plus
/// the feature matrix, all registered as constants when a pass runs.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTensors {
    pub adjacency: Array2<f64>,
    pub propagation: Array2<f64>,
    pub features: Array2<f64>,
    pub label: usize,
}

impl GraphTensors {
    pub fn from_graph(graph: &crate::dataset::Graph) -> Self {
        GraphTensors {
            propagation: gcn_propagation(&graph.adjacency),
            adjacency: graph.adjacency.clone(),
            features: graph.features.clone(),
            label: graph.label,
        }
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.nrows()
    }
}
