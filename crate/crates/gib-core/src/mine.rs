//! Neural mutual-information estimation via the Donsker–Varadhan bound.
//!
//! A statistics network scores (graph, received-representation) pairs: a
//! GNN branch embeds the graph, the embedding is concatenated with the
//! representation, and an MLP maps the pair to a real number. The bound is
//!
//! `mean_i f(g_i, x_i) - log mean_i exp f(g_i, x_(pi(i)))`
//!
//! where `pi` is a fixed-point-free shuffle of the batch, so the second
//! expectation runs over product-of-marginals samples. The log term uses
//! log-sum-exp, keeping the estimate finite whenever the scores are.

use crate::autodiff::{Tape, VarId};
use crate::backbone::{
    gnn_stack_forward, mlp_forward, BackboneKind, GnnStack, GnnStackBound, GraphTensors, Mlp,
    MlpBound, ParamSet,
};
use crate::optim::Adam;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum MineError {
    #[error("batch of {0} is too small; need at least 2 pairs")]
    BatchTooSmall(usize),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite estimate: {0}")]
    NonFinite(String),
}

/// Statistics network: graph branch plus joint scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct StatisticsNetwork {
    pub gnn: GnnStack,
    pub mlp: Mlp,
}

pub struct StatisticsNetworkBound {
    pub gnn: GnnStackBound,
    pub mlp: MlpBound,
}

impl StatisticsNetwork {
    /// Graph branch mirrors the transmitter's backbone shape (own weights);
    /// the joint MLP maps `[graph embed, representation]` to a scalar.
    pub fn init(
        kind: BackboneKind,
        feature_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        StatisticsNetwork {
            gnn: GnnStack::init(kind, feature_dim, hidden_dim, 2, rng),
            mlp: Mlp::init(&[2 * hidden_dim, hidden_dim, 1], rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> StatisticsNetworkBound {
        StatisticsNetworkBound { gnn: self.gnn.bind(tape), mlp: self.mlp.bind(tape) }
    }
}

impl ParamSet for StatisticsNetwork {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.gnn.visit(&format!("{prefix}.gnn"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.gnn.visit_mut(&format!("{prefix}.gnn"), f);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
    }
}

/// Mean-pooled graph embedding from the statistics network's GNN branch.
pub fn embed_graph(tape: &mut Tape, graph: &GraphTensors, gnn: &GnnStackBound) -> VarId {
    let prop = tape.leaf(graph.propagation.clone());
    let adj = tape.leaf(graph.adjacency.clone());
    let feats = tape.leaf(graph.features.clone());
    let node_embed = gnn_stack_forward(tape, prop, adj, feats, gnn);
    tape.mean_rows(node_embed)
}

/// Scalar score of one (embedding, representation) pair.
pub fn score_pair(tape: &mut Tape, u: VarId, v: VarId, mlp: &MlpBound) -> VarId {
    let joint = tape.concat_cols(u, v);
    mlp_forward(tape, joint, mlp)
}

/// The bound from per-pair scores already on the tape: joint scores from
/// aligned pairs, shuffled scores from derangement pairs.
pub fn dv_bound_from_scores(tape: &mut Tape, joint: &[VarId], shuffled: &[VarId]) -> VarId {
    assert!(joint.len() >= 2 && joint.len() == shuffled.len());
    let mean_joint = tape.mean_scalars(joint);
    let stacked = tape.stack_scalars(shuffled);
    let lse = tape.log_sum_exp(stacked);
    let log_mean = tape.offset(lse, -(shuffled.len() as f64).ln());
    tape.sub(mean_joint, log_mean)
}

/// Uniform random cyclic permutation (Sattolo), so no index maps to itself.
pub fn derangement(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(len >= 2, "derangement needs at least two elements");
    let mut perm: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    perm
}

/// Build the bound over (graph, representation) pairs on an existing tape.
/// Representations are tape nodes, so gradients reach whatever produced
/// them; `perm` pairs graph `i` with representation `perm[i]`.
pub fn dv_nodes(
    tape: &mut Tape,
    graphs: &[&GraphTensors],
    representations: &[VarId],
    net: &StatisticsNetworkBound,
    perm: &[usize],
) -> Result<VarId, MineError> {
    let k = graphs.len();
    if k < 2 {
        return Err(MineError::BatchTooSmall(k));
    }
    if representations.len() != k || perm.len() != k {
        return Err(MineError::Argument(format!(
            "batch size {k} vs {} representations, {} permutation entries",
            representations.len(),
            perm.len()
        )));
    }
    if perm.iter().enumerate().any(|(i, &p)| p == i || p >= k) {
        return Err(MineError::Argument("permutation must be fixed-point free".into()));
    }
    let embeds: Vec<VarId> =
        graphs.iter().map(|g| embed_graph(tape, g, &net.gnn)).collect();
    let mut joint = Vec::with_capacity(k);
    let mut shuffled = Vec::with_capacity(k);
    for i in 0..k {
        joint.push(score_pair(tape, embeds[i], representations[i], &net.mlp));
        shuffled.push(score_pair(tape, embeds[i], representations[perm[i]], &net.mlp));
    }
    Ok(dv_bound_from_scores(tape, &joint, &shuffled))
}

/// One-shot estimate over a batch of (graph, representation-value) pairs.
/// The shuffle is drawn from `rng`.
pub fn dv_estimate(
    batch: &[(&GraphTensors, Array2<f64>)],
    net: &StatisticsNetwork,
    rng: &mut ChaCha8Rng,
) -> Result<f64, MineError> {
    if batch.len() < 2 {
        return Err(MineError::BatchTooSmall(batch.len()));
    }
    let perm = derangement(batch.len(), rng);
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let graphs: Vec<&GraphTensors> = batch.iter().map(|(g, _)| *g).collect();
    let reps: Vec<VarId> = batch.iter().map(|(_, x)| tape.leaf(x.clone())).collect();
    let node = dv_nodes(&mut tape, &graphs, &reps, &bound, &perm)?;
    let value = tape.scalar_value(node);
    if !value.is_finite() {
        return Err(MineError::NonFinite(format!("estimate {value}")));
    }
    Ok(value)
}

/// Gradient-ascend the bound on the statistics network only; the
/// representations are treated as constants. Returns the per-step
/// estimates (before each update).
pub fn mine_inner_train(
    batch: &[(&GraphTensors, Array2<f64>)],
    net: &mut StatisticsNetwork,
    steps: usize,
    learning_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, MineError> {
    if steps == 0 {
        return Err(MineError::Argument("steps must be at least 1".into()));
    }
    if batch.len() < 2 {
        return Err(MineError::BatchTooSmall(batch.len()));
    }
    let mut optimizer = Adam::new(learning_rate);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let perm = derangement(batch.len(), rng);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let ids = bound.ids();
        let graphs: Vec<&GraphTensors> = batch.iter().map(|(g, _)| *g).collect();
        let reps: Vec<VarId> = batch.iter().map(|(_, x)| tape.leaf(x.clone())).collect();
        let estimate_node = dv_nodes(&mut tape, &graphs, &reps, &bound, &perm)?;
        let estimate = tape.scalar_value(estimate_node);
        if !estimate.is_finite() {
            return Err(MineError::NonFinite(format!("step {step}: estimate {estimate}")));
        }
        curve.push(estimate);
        // ascend: minimize the negated bound
        let loss = tape.scale(estimate_node, -1.0);
        tape.backward(loss);
        let grads: Vec<Array2<f64>> = ids.iter().map(|&id| tape.grad(id).clone()).collect();
        let mut params = net.params_mut();
        optimizer.step(&mut params, &grads);
    }
    Ok(curve)
}

impl StatisticsNetworkBound {
    /// Tape ids in the same order as [`StatisticsNetwork::params_mut`].
    pub fn ids(&self) -> Vec<VarId> {
        let mut ids = self.gnn.ids();
        ids.extend(self.mlp.ids());
        ids
    }
}

impl StatisticsNetwork {
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p = self.gnn.params_mut();
        p.extend(self.mlp.params_mut());
        p
    }
}
