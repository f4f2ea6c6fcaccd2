//! Message-passing GNN over the agent graph and the refinement loop that
//! fuses learned messages with particle BP messages.
//!
//! Per iteration: (1) one round of classical BP produces per-edge particle
//! messages, (2) a GNN computes an edge message from the two node embeddings
//! and the normalized BP message, (3) each BP message is refined as
//!
//! ```text
//! phi_refined = g_s(m) * phi + g_v(m)
//! ```
//!
//! with a sigmoid-headed scalar net `g_s` and a ReLU-headed vector net
//! `g_v`. Refined messages feed the next round's weight products and,
//! after the last round, the belief update. Node embeddings initialize
//! from belief moments, `h = [mean, vec(cov)]`, and are updated by `g_n`
//! only when more than one iteration runs.
//!
//! One parameter set serves every edge and node, so a model trained on a
//! small network runs unchanged on a larger one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bp::{
    self, BpError, EdgeContext, MessageRefiner, ParticleBelief, TimeStepOutput,
};
use crate::neural::{Mlp, NeuralError, NodeRef, OutputActivation, ParamId, Tape};
use crate::rng::{StreamPurpose, StreamRoot};
use crate::scenario::{MeasurementModel, MotionModel, StepSlice};

/// Node embeddings are belief moments: 4 mean entries + 16 covariance
/// entries, vectorized column-wise.
pub const NODE_EMBED_DIM: usize = 20;

/// Default GNN message width.
pub const DEFAULT_MSG_DIM: usize = 32;

/// Default hidden width of the single-hidden-layer MLPs.
pub const DEFAULT_HIDDEN_WIDTH: usize = 64;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("model/scenario mismatch: {0}")]
    ShapeMismatch(String),
}

/// Learned vector summary attached to one graph node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeEmbedding(pub Vec<f64>);

/// Learned message on a directed edge.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnMessage {
    pub source: usize,
    pub target: usize,
    pub values: Vec<f64>,
}

/// Architecture metadata; checkpoints carry it so they self-validate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NebpDims {
    pub embed_dim: usize,
    pub msg_dim: usize,
    pub hidden_width: usize,
    /// Particle count K; fixes the widths of the edge and shift nets.
    pub particle_count: usize,
    /// Message passing iterations T.
    pub iterations: usize,
}

impl NebpDims {
    pub fn new(particle_count: usize) -> Self {
        NebpDims {
            embed_dim: NODE_EMBED_DIM,
            msg_dim: DEFAULT_MSG_DIM,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            particle_count,
            iterations: 1,
        }
    }

    pub fn validate(&self) -> Result<(), GnnError> {
        if self.embed_dim != NODE_EMBED_DIM {
            return Err(GnnError::ShapeMismatch(format!(
                "embed_dim must be {NODE_EMBED_DIM} (belief mean + covariance)"
            )));
        }
        if self.msg_dim == 0 || self.hidden_width == 0 || self.particle_count == 0 {
            return Err(GnnError::ShapeMismatch("widths must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(GnnError::ShapeMismatch("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parameter sets of the four networks plus architecture metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NebpModel {
    pub dims: NebpDims,
    edge_net: Mlp,
    node_net: Mlp,
    scale_net: Mlp,
    shift_net: Mlp,
}

impl NebpModel {
    /// Seeded initialization.
    ///
    /// Weights start Xavier-uniform; on top of that, first-layer columns of
    /// the edge and node nets are rescaled to precondition raw-unit inputs
    /// (positions span tens of meters, message attributes are O(1/K)), and
    /// the shift-net output layer starts near zero so refinement begins as a
    /// small correction to BP rather than drowning the likelihood term.
    pub fn new(dims: NebpDims, seed: u64) -> Result<Self, GnnError> {
        dims.validate()?;
        let root = StreamRoot(seed);
        let k = dims.particle_count;
        let mut edge_net = Mlp::new(
            &[2 * dims.embed_dim + k, dims.hidden_width, dims.msg_dim],
            OutputActivation::Identity,
            &mut root.stream(StreamPurpose::ParamInit, &[0]),
        );
        let mut node_net = Mlp::new(
            &[dims.embed_dim + dims.msg_dim, dims.hidden_width, dims.embed_dim],
            OutputActivation::Identity,
            &mut root.stream(StreamPurpose::ParamInit, &[1]),
        );
        let scale_net = Mlp::new(
            &[dims.msg_dim, dims.hidden_width, 1],
            OutputActivation::Sigmoid,
            &mut root.stream(StreamPurpose::ParamInit, &[2]),
        );
        let mut shift_net = Mlp::new(
            &[dims.msg_dim, dims.hidden_width, k],
            OutputActivation::Relu,
            &mut root.stream(StreamPurpose::ParamInit, &[3]),
        );

        let embed_scales = embedding_feature_scales();
        let mut edge_scales = Vec::with_capacity(2 * dims.embed_dim + k);
        edge_scales.extend_from_slice(&embed_scales);
        edge_scales.extend_from_slice(&embed_scales);
        edge_scales.extend(std::iter::repeat(k as f64).take(k));
        edge_net.scale_input_columns(&edge_scales);

        let mut node_scales = Vec::with_capacity(dims.embed_dim + dims.msg_dim);
        node_scales.extend_from_slice(&embed_scales);
        node_scales.extend(std::iter::repeat(1.0).take(dims.msg_dim));
        node_net.scale_input_columns(&node_scales);

        shift_net.scale_output_layer(0.1 / k as f64);

        Ok(NebpModel { dims, edge_net, node_net, scale_net, shift_net })
    }

    /// A model whose refinement is exactly the identity: `g_s` saturated to
    /// 1 and `g_v` pinned to 0, so refined BP reproduces plain BP bit for
    /// bit. Useful as a safe starting point and as a baseline check.
    pub fn bp_identity(dims: NebpDims, seed: u64) -> Result<Self, GnnError> {
        let mut model = Self::new(dims, seed)?;
        model.force_bp_identity();
        Ok(model)
    }

    /// Pin `g_s` to 1 and `g_v` to 0 regardless of input.
    pub fn force_bp_identity(&mut self) {
        // sigmoid(40) rounds to 1.0 exactly in f64; relu(0) is exactly 0
        self.scale_net.pin_output(40.0);
        self.shift_net.pin_output(0.0);
    }

    pub fn edge_net(&self) -> &Mlp {
        &self.edge_net
    }

    pub fn node_net(&self) -> &Mlp {
        &self.node_net
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn shift_net(&self) -> &Mlp {
        &self.shift_net
    }

    fn nets(&self) -> [&Mlp; 4] {
        [&self.edge_net, &self.node_net, &self.scale_net, &self.shift_net]
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.edge_net, &mut self.node_net, &mut self.scale_net, &mut self.shift_net]
    }

    /// First `ParamId` of each network in the canonical flat layout.
    pub fn param_base(&self, net: usize) -> usize {
        self.nets().iter().take(net).map(|n| n.num_param_tensors()).sum()
    }

    /// `(id, flat offset, len)` for every parameter tensor.
    pub fn param_layout(&self) -> Vec<(ParamId, usize, usize)> {
        let mut layout = Vec::new();
        let mut id = 0usize;
        let mut offset = 0usize;
        for net in self.nets() {
            for t in 0..net.num_param_tensors() {
                let len = net.param_tensor(t).len();
                layout.push((ParamId(id), offset, len));
                id += 1;
                offset += len;
            }
        }
        layout
    }

    pub fn num_params(&self) -> usize {
        self.nets().iter().map(|n| (0..n.num_param_tensors()).map(|t| n.param_tensor(t).len()).sum::<usize>()).sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for net in self.nets() {
            for t in 0..net.num_param_tensors() {
                flat.extend_from_slice(net.param_tensor(t));
            }
        }
        flat
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter size mismatch");
        let mut offset = 0;
        for net in self.nets_mut() {
            for t in 0..net.num_param_tensors() {
                let dst = net.param_tensor_mut(t);
                dst.copy_from_slice(&flat[offset..offset + dst.len()]);
                offset += dst.len();
            }
        }
    }

    /// Verify stored net widths against the recorded dims; checkpoints run
    /// through this on load.
    pub fn check_consistent(&self) -> Result<(), GnnError> {
        self.dims.validate()?;
        let d = &self.dims;
        let expect = [
            (self.edge_net.input_width(), 2 * d.embed_dim + d.particle_count, "edge in"),
            (self.edge_net.output_width(), d.msg_dim, "edge out"),
            (self.node_net.input_width(), d.embed_dim + d.msg_dim, "node in"),
            (self.node_net.output_width(), d.embed_dim, "node out"),
            (self.scale_net.input_width(), d.msg_dim, "scale in"),
            (self.scale_net.output_width(), 1, "scale out"),
            (self.shift_net.input_width(), d.msg_dim, "shift in"),
            (self.shift_net.output_width(), d.particle_count, "shift out"),
        ];
        for (got, want, what) in expect {
            if got != want {
                return Err(GnnError::ShapeMismatch(format!("{what}: {got} != {want}")));
            }
        }
        if self.scale_net.output_activation() != OutputActivation::Sigmoid
            || self.shift_net.output_activation() != OutputActivation::Relu
        {
            return Err(GnnError::ShapeMismatch("scale/shift head activations wrong".into()));
        }
        Ok(())
    }
}

/// Initialization-time input scaling for one node embedding: positions span
/// tens of meters and position variances tens of m^2, so their first-layer
/// columns start smaller.
fn embedding_feature_scales() -> [f64; NODE_EMBED_DIM] {
    let mut s = [1.0; NODE_EMBED_DIM];
    s[0] = 0.02; // px
    s[1] = 0.02; // py
    for (i, j) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
        s[4 + 4 * j + i] = 0.1; // position covariance block, column-major
    }
    s
}

/// Embeddings from belief moments: `[mean, vec(cov)]`, covariance
/// vectorized column-wise.
pub fn init_embeddings(beliefs: &[ParticleBelief]) -> Vec<NodeEmbedding> {
    beliefs
        .iter()
        .map(|b| {
            let s = bp::summarize(b);
            let mut h = Vec::with_capacity(NODE_EMBED_DIM);
            h.extend_from_slice(&s.mean);
            for j in 0..4 {
                for i in 0..4 {
                    h.push(s.covariance[i][j]);
                }
            }
            NodeEmbedding(h)
        })
        .collect()
}

/// GNN edge message `g_e(h_source, h_target, edge_attr)`.
pub fn gnn_edge_message(
    model: &NebpModel,
    h_source: &NodeEmbedding,
    h_target: &NodeEmbedding,
    edge_attr: &[f64],
    source: usize,
    target: usize,
) -> Result<GnnMessage, GnnError> {
    let mut input =
        Vec::with_capacity(h_source.0.len() + h_target.0.len() + edge_attr.len());
    input.extend_from_slice(&h_source.0);
    input.extend_from_slice(&h_target.0);
    input.extend_from_slice(edge_attr);
    let values = model.edge_net.forward(&input)?;
    Ok(GnnMessage { source, target, values })
}

/// Node update `g_n(h, sum of incoming messages)`; the empty sum is zero.
pub fn gnn_node_update(
    model: &NebpModel,
    h: &NodeEmbedding,
    incoming: &[GnnMessage],
) -> Result<NodeEmbedding, GnnError> {
    let mut total = vec![0.0; model.dims.msg_dim];
    for m in incoming {
        if m.values.len() != total.len() {
            return Err(GnnError::ShapeMismatch(format!(
                "message width {} != {}",
                m.values.len(),
                total.len()
            )));
        }
        for (t, v) in total.iter_mut().zip(&m.values) {
            *t += v;
        }
    }
    let mut input = Vec::with_capacity(h.0.len() + total.len());
    input.extend_from_slice(&h.0);
    input.extend_from_slice(&total);
    Ok(NodeEmbedding(model.node_net.forward(&input)?))
}

/// Refined message `g_s(m) * phi + g_v(m)`; non-negative by construction.
pub fn combine_messages(
    model: &NebpModel,
    gnn_msg: &GnnMessage,
    bp_msg: &bp::EdgeMessage,
) -> Result<bp::EdgeMessage, GnnError> {
    let s = model.scale_net.forward(&gnn_msg.values)?[0];
    let v = model.shift_net.forward(&gnn_msg.values)?;
    if v.len() != bp_msg.values.len() {
        return Err(GnnError::ShapeMismatch(format!(
            "shift output {} != particle count {}",
            v.len(),
            bp_msg.values.len()
        )));
    }
    let values = bp_msg.values.iter().zip(&v).map(|(phi, vi)| s * phi + vi).collect();
    Ok(bp::EdgeMessage { source: bp_msg.source, target: bp_msg.target, values })
}

/// Normalize raw message values to sum 1 for use as an edge attribute;
/// degenerate messages fall back to the uniform attribute.
fn edge_attribute(values: &[f64]) -> Vec<f64> {
    let sum: f64 = values.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        values.iter().map(|v| v / sum).collect()
    } else {
        vec![1.0 / values.len() as f64; values.len()]
    }
}

struct NebpRefiner<'a> {
    model: &'a NebpModel,
    num_mobile: usize,
    embeddings: Vec<NodeEmbedding>,
}

impl MessageRefiner for NebpRefiner<'_> {
    fn wants_anchor_edges(&self) -> bool {
        self.model.dims.iterations > 1
    }

    fn begin(&mut self, pred: &[ParticleBelief], _ctx: &EdgeContext) -> Result<(), BpError> {
        self.embeddings = init_embeddings(pred);
        Ok(())
    }

    fn refine(
        &mut self,
        t: usize,
        ctx: &EdgeContext,
        bp_values: Vec<Vec<f64>>,
    ) -> Result<Vec<Vec<f64>>, BpError> {
        let model = self.model;
        let messages: Vec<GnnMessage> = ctx
            .edges
            .iter()
            .zip(&bp_values)
            .map(|(&(j, i), phi)| {
                let attr = edge_attribute(phi);
                gnn_edge_message(model, &self.embeddings[j], &self.embeddings[i], &attr, j, i)
                    .expect("widths validated before the time step")
            })
            .collect();

        let refined = ctx
            .edges
            .iter()
            .enumerate()
            .map(|(e, &(_, i))| {
                if i >= self.num_mobile {
                    // anchor-target messages only feed node updates
                    return bp_values[e].clone();
                }
                let s = model
                    .scale_net
                    .forward(&messages[e].values)
                    .expect("widths validated")[0];
                let v = model.shift_net.forward(&messages[e].values).expect("widths validated");
                bp_values[e].iter().zip(&v).map(|(phi, vi)| s * phi + vi).collect()
            })
            .collect();

        if t < model.dims.iterations {
            let n = self.embeddings.len();
            let mut updated = Vec::with_capacity(n);
            for node in 0..n {
                let incoming: Vec<GnnMessage> = messages
                    .iter()
                    .filter(|m| m.target == node)
                    .cloned()
                    .collect();
                updated.push(
                    gnn_node_update(model, &self.embeddings[node], &incoming)
                        .expect("widths validated"),
                );
            }
            self.embeddings = updated;
        }
        Ok(refined)
    }
}

fn validate_inputs(
    model: &NebpModel,
    beliefs: &[ParticleBelief],
) -> Result<(), GnnError> {
    model.check_consistent()?;
    let k = beliefs.first().map(|b| b.len()).unwrap_or(0);
    if k != model.dims.particle_count {
        return Err(GnnError::ShapeMismatch(format!(
            "model expects K={}, beliefs have K={k}",
            model.dims.particle_count
        )));
    }
    Ok(())
}

/// One refined BP time step (inference path, no gradients).
///
/// Consumes exactly the same random streams as [`bp::bp_time_step`], so the
/// two are comparable run for run.
pub fn nebp_time_step(
    beliefs: &[ParticleBelief],
    slice: &StepSlice,
    model: &NebpModel,
    motion: &MotionModel,
    measurement: &MeasurementModel,
    root: StreamRoot,
) -> Result<TimeStepOutput, GnnError> {
    validate_inputs(model, beliefs)?;
    let mut refiner =
        NebpRefiner { model, num_mobile: slice.num_mobile, embeddings: Vec::new() };
    Ok(bp::time_step_core(
        beliefs,
        slice,
        model.dims.iterations,
        motion,
        &mut refiner,
        root,
        measurement,
    )?)
}

/// Output of a traced time step: the usual beliefs plus tape nodes for each
/// mobile agent's position estimate.
pub struct TracedStep {
    pub out: TimeStepOutput,
    /// `(x, y)` estimate nodes per node id; `None` for anchors.
    pub estimates: Vec<Option<(NodeRef, NodeRef)>>,
}

/// One refined BP time step recorded on a gradient tape (training path).
///
/// Everything from the edge attributes to the position estimates is
/// differentiable; likelihoods, prediction weights, and particle positions
/// enter as constants. Weight products run directly in value space here
/// (the inference path uses log-space products), which is why gradients are
/// taken per time step while beliefs crossing step boundaries are constants.
pub fn nebp_time_step_traced(
    beliefs: &[ParticleBelief],
    slice: &StepSlice,
    model: &NebpModel,
    motion: &MotionModel,
    measurement: &MeasurementModel,
    root: StreamRoot,
    tape: &mut Tape,
) -> Result<TracedStep, GnnError> {
    validate_inputs(model, beliefs)?;
    let n = beliefs.len();
    let num_mobile = slice.num_mobile;
    let step = slice.step as u64;
    let k = model.dims.particle_count;
    let iterations = model.dims.iterations;
    for b in beliefs {
        if !b.is_normalized() {
            return Err(BpError::NotNormalized.into());
        }
        if b.len() != k {
            return Err(BpError::ParticleCountMismatch(b.len(), k).into());
        }
    }

    // prediction, identical streams to the inference path
    let mut pred: Vec<ParticleBelief> = Vec::with_capacity(n);
    for (i, belief) in beliefs.iter().enumerate() {
        if i >= num_mobile {
            pred.push(belief.clone());
        } else {
            let mut rng = root.stream(StreamPurpose::PredictMotion, &[i as u64, step]);
            pred.push(bp::predict(belief, motion, &mut rng)?);
        }
    }

    let receiver_limit = if iterations > 1 { n } else { num_mobile };
    let mut edges = Vec::new();
    for i in 0..receiver_limit {
        let mut senders = slice.neighbors[i].to_vec();
        senders.sort_unstable();
        for j in senders {
            edges.push((j, i));
        }
    }
    let likelihood_nodes: Vec<NodeRef> = edges
        .iter()
        .map(|&(j, i)| {
            let z = slice
                .measurements
                .get(j, i)
                .unwrap_or_else(|| panic!("missing measurement {j} -> {i} at step {step}"));
            let lik: Vec<f64> = (0..k)
                .map(|p| {
                    bp::range_likelihood(
                        z,
                        pred[j].position(p),
                        pred[i].position(p),
                        measurement.range_noise_std,
                    )
                })
                .collect();
            tape.constant(lik)
        })
        .collect();

    let embeddings = init_embeddings(&pred);
    let mut h_nodes: Vec<NodeRef> =
        embeddings.iter().map(|h| tape.constant(h.0.clone())).collect();
    let pred_weight_nodes: Vec<NodeRef> =
        pred.iter().map(|b| tape.constant(b.weights().to_vec())).collect();

    let edge_base = model.param_base(0);
    let node_base = model.param_base(1);
    let scale_base = model.param_base(2);
    let shift_base = model.param_base(3);

    // omega: latest unnormalized weight nodes, Eq.-style product chain
    let mut omega: Vec<NodeRef> = pred_weight_nodes.clone();
    for t in 1..=iterations {
        let phi: Vec<NodeRef> = edges
            .iter()
            .zip(&likelihood_nodes)
            .map(|(&(j, _), lik)| tape.mul(*lik, omega[j]))
            .collect();

        let mut gnn_msgs: Vec<NodeRef> = Vec::with_capacity(edges.len());
        for (e, &(j, i)) in edges.iter().enumerate() {
            let phi_sum = tape.sum(phi[e]);
            let attr = if tape.scalar_value(phi_sum) > 0.0 {
                tape.div_scalar(phi[e], phi_sum)
            } else {
                tape.constant(vec![1.0 / k as f64; k])
            };
            let input = tape.concat(&[h_nodes[j], h_nodes[i], attr]);
            gnn_msgs.push(model.edge_net.forward_tape(tape, input, edge_base)?);
        }

        let refined: Vec<Option<NodeRef>> = edges
            .iter()
            .enumerate()
            .map(|(e, &(_, i))| {
                if i >= num_mobile {
                    return Ok(None);
                }
                let s = model.scale_net.forward_tape(tape, gnn_msgs[e], scale_base)?;
                let v = model.shift_net.forward_tape(tape, gnn_msgs[e], shift_base)?;
                let scaled = tape.scale(s, phi[e]);
                Ok(Some(tape.add(scaled, v)))
            })
            .collect::<Result<_, GnnError>>()?;

        let mut next = omega.clone();
        for i in 0..num_mobile {
            let incoming: Vec<NodeRef> = edges
                .iter()
                .enumerate()
                .filter(|(_, &(_, recv))| recv == i)
                .filter_map(|(e, _)| refined[e])
                .collect();
            if incoming.is_empty() {
                next[i] = pred_weight_nodes[i];
                continue;
            }
            let mut acc = pred_weight_nodes[i];
            for msg in incoming {
                acc = tape.mul(acc, msg);
            }
            if tape.value(acc).iter().all(|&w| w == 0.0) {
                log::warn!(
                    "degenerate traced weights for agent {i} at step {step} round {t}; \
                     keeping prediction weights"
                );
                acc = pred_weight_nodes[i];
            }
            next[i] = acc;
        }
        omega = next;

        if t < iterations {
            let msg_dim = model.dims.msg_dim;
            let mut updated = Vec::with_capacity(n);
            for node in 0..n {
                let incoming: Vec<NodeRef> = edges
                    .iter()
                    .enumerate()
                    .filter(|(_, &(_, recv))| recv == node)
                    .map(|(e, _)| gnn_msgs[e])
                    .collect();
                let total = match incoming.split_first() {
                    None => tape.constant(vec![0.0; msg_dim]),
                    Some((first, rest)) => {
                        let mut acc = *first;
                        for m in rest {
                            acc = tape.add(acc, *m);
                        }
                        acc
                    }
                };
                let input = tape.concat(&[h_nodes[node], total]);
                updated.push(model.node_net.forward_tape(tape, input, node_base)?);
            }
            h_nodes = updated;
        }
    }

    // normalize on tape and extract estimates
    let mut posterior = Vec::with_capacity(n);
    let mut resampled = Vec::with_capacity(n);
    let mut summaries = Vec::with_capacity(n);
    let mut estimates: Vec<Option<(NodeRef, NodeRef)>> = Vec::with_capacity(n);
    for i in 0..n {
        if i >= num_mobile {
            let post = pred[i].clone();
            summaries.push(bp::summarize(&post));
            resampled.push(post.clone());
            posterior.push(post);
            estimates.push(None);
            continue;
        }
        let total = tape.sum(omega[i]);
        let normalized = if tape.scalar_value(total) > 0.0 {
            tape.div_scalar(omega[i], total)
        } else {
            log::warn!(
                "degenerate traced posterior for agent {i} at step {step}; \
                 keeping prediction weights"
            );
            pred_weight_nodes[i]
        };
        let px = tape.constant(pred[i].particles().iter().map(|p| p[0]).collect());
        let py = tape.constant(pred[i].particles().iter().map(|p| p[1]).collect());
        let est_x = tape.dot(normalized, px);
        let est_y = tape.dot(normalized, py);
        estimates.push(Some((est_x, est_y)));

        let post =
            ParticleBelief::new(pred[i].particles().to_vec(), tape.value(normalized).to_vec())?;
        summaries.push(bp::summarize(&post));
        let mut rng = root.stream(StreamPurpose::Resample, &[i as u64, step]);
        resampled.push(bp::resample(&post, &mut rng));
        posterior.push(post);
    }

    Ok(TracedStep { out: TimeStepOutput { posterior, resampled, summaries }, estimates })
}


#[cfg(test)]
impl NebpModel {
    fn scale_net_pin_for_test(&mut self, bias: f64) {
        self.scale_net.pin_output(bias);
    }

    fn poison_node_net_for_test(&mut self) {
        for t in 0..self.node_net.num_param_tensors() {
            self.node_net.param_tensor_mut(t).iter_mut().for_each(|p| *p = f64::NAN);
        }
    }
}
