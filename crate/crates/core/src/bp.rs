//! Particle-based belief propagation for cooperative localization.
//!
//! Beliefs are weighted particle sets. One time step runs a prediction per
//! agent followed by `T` synchronous message passing rounds. In round `t`
//! the directed message on edge `j -> i` is
//!
//! ```text
//! phi[j->i][k] = p(z_{j->i} | x_j^(k), x_i^(k)) * w_j^(t-1, k)
//! ```
//!
//! pairing particles by index, and the receiving agent multiplies its
//! prediction weights by all incoming messages elementwise. Weight products
//! are accumulated in log space and exponentiated after an underflow guard,
//! so dense neighborhoods cannot silently collapse weights to zero.
//! After the last round weights are normalized, moments are extracted, and
//! a systematic resampling step controls degeneracy before the next
//! prediction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky_psd, dist2, lower_tri_mul, Mat2, Mat4, Vec2, Vec4};
use crate::rng::{StreamPurpose, StreamRoot};
use crate::scenario::{AgentState, MeasurementModel, MotionModel, Prior, StepSlice};

/// Weight sums below `exp(LOG_UNDERFLOW_GUARD)` are rescaled before
/// exponentiation; normalization later removes the scale again.
const LOG_UNDERFLOW_GUARD: f64 = -690.0;

const NORMALIZED_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BpError {
    #[error("belief is not normalized")]
    NotNormalized,
    #[error("covariance is not positive semi-definite")]
    BadCovariance,
    #[error("particle counts do not match: {0} vs {1}")]
    ParticleCountMismatch(usize, usize),
    #[error("degenerate message: weight vector is all zeros or non-finite")]
    DegenerateMessage,
    #[error("belief has no particles")]
    Empty,
}

/// Weighted particle representation of one agent's belief.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleBelief {
    particles: Vec<Vec4>,
    weights: Vec<f64>,
    normalized: bool,
}

impl ParticleBelief {
    pub fn new(particles: Vec<Vec4>, weights: Vec<f64>) -> Result<Self, BpError> {
        if particles.is_empty() {
            return Err(BpError::Empty);
        }
        if particles.len() != weights.len() {
            return Err(BpError::ParticleCountMismatch(particles.len(), weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(BpError::DegenerateMessage);
        }
        let sum: f64 = weights.iter().sum();
        let normalized = (sum - 1.0).abs() <= NORMALIZED_TOL;
        Ok(ParticleBelief { particles, weights, normalized })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Vec4] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Planar position of particle `k`.
    pub fn position(&self, k: usize) -> Vec2 {
        [self.particles[k][0], self.particles[k][1]]
    }
}

/// Per-particle message values on a directed edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeMessage {
    pub source: usize,
    pub target: usize,
    pub values: Vec<f64>,
}

/// First two weighted moments of a belief.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec4,
    pub covariance: Mat4,
}

impl GaussianSummary {
    pub fn position_mean(&self) -> Vec2 {
        [self.mean[0], self.mean[1]]
    }

    /// Upper-left 2x2 block of the covariance.
    pub fn position_cov(&self) -> Mat2 {
        [
            [self.covariance[0][0], self.covariance[0][1]],
            [self.covariance[1][0], self.covariance[1][1]],
        ]
    }
}

/// Draw each particle through the mobility model; weights carry over.
pub fn predict<R: Rng>(
    prev_belief: &ParticleBelief,
    model: &MotionModel,
    rng: &mut R,
) -> Result<ParticleBelief, BpError> {
    if !prev_belief.is_normalized() {
        return Err(BpError::NotNormalized);
    }
    let particles = prev_belief
        .particles
        .iter()
        .map(|p| {
            let state = AgentState::from_vec4(*p);
            crate::scenario::step_motion(&state, model, rng).as_vec4()
        })
        .collect();
    Ok(ParticleBelief {
        particles,
        weights: prev_belief.weights.clone(),
        normalized: prev_belief.normalized,
    })
}

/// Sample `k` particles from a Gaussian prior with uniform weights 1/k.
pub fn init_belief<R: Rng>(
    prior_mean: Vec4,
    prior_cov: &Mat4,
    k: usize,
    rng: &mut R,
) -> Result<ParticleBelief, BpError> {
    if k == 0 {
        return Err(BpError::Empty);
    }
    let chol = cholesky_psd(prior_cov, 1e-9).ok_or(BpError::BadCovariance)?;
    let mut particles = Vec::with_capacity(k);
    for _ in 0..k {
        let z: Vec4 = std::array::from_fn(|_| rng.sample(StandardNormal));
        let offset = lower_tri_mul(&chol, z);
        particles.push(std::array::from_fn(|i| prior_mean[i] + offset[i]));
    }
    let w = 1.0 / k as f64;
    Ok(ParticleBelief { particles, weights: vec![w; k], normalized: true })
}

/// Particle belief matching a node's prior; anchors become point masses.
pub fn belief_from_prior<R: Rng>(
    prior: &Prior,
    k: usize,
    rng: &mut R,
) -> Result<ParticleBelief, BpError> {
    match prior {
        Prior::Gaussian { mean, cov } => init_belief(*mean, cov, k, rng),
        Prior::Point { state } => {
            if k == 0 {
                return Err(BpError::Empty);
            }
            let w = 1.0 / k as f64;
            Ok(ParticleBelief {
                particles: vec![state.as_vec4(); k],
                weights: vec![w; k],
                normalized: true,
            })
        }
    }
}

/// Gaussian range likelihood `N(z; ||p_j - p_i||, sigma_r^2)`.
pub fn range_likelihood(z: f64, p_j: Vec2, p_i: Vec2, sigma_r: f64) -> f64 {
    let residual = z - dist2(p_j, p_i);
    let norm = 1.0 / (sigma_r * (2.0 * std::f64::consts::PI).sqrt());
    norm * (-0.5 * (residual / sigma_r) * (residual / sigma_r)).exp()
}

/// Per-particle message on edge `source -> target`: likelihood at the k-th
/// particle pair times the sender's current weight.
pub fn compute_edge_message(
    sender_belief: &ParticleBelief,
    receiver_belief: &ParticleBelief,
    z: f64,
    model: &MeasurementModel,
    source: usize,
    target: usize,
) -> Result<EdgeMessage, BpError> {
    if sender_belief.len() != receiver_belief.len() {
        return Err(BpError::ParticleCountMismatch(sender_belief.len(), receiver_belief.len()));
    }
    let values = (0..sender_belief.len())
        .map(|k| {
            range_likelihood(
                z,
                sender_belief.position(k),
                receiver_belief.position(k),
                model.range_noise_std,
            ) * sender_belief.weights[k]
        })
        .collect();
    Ok(EdgeMessage { source, target, values })
}

/// Elementwise product of prediction weights and message values, in log
/// space. Rescales only when the true product would underflow.
fn product_update(pred_weights: &[f64], message_values: &[&[f64]]) -> Result<Vec<f64>, BpError> {
    if message_values.is_empty() {
        return Ok(pred_weights.to_vec());
    }
    let k = pred_weights.len();
    let mut log_w: Vec<f64> = pred_weights.iter().map(|w| w.ln()).collect();
    for values in message_values {
        if values.len() != k {
            return Err(BpError::ParticleCountMismatch(values.len(), k));
        }
        for (lw, v) in log_w.iter_mut().zip(values.iter()) {
            *lw += v.ln();
        }
    }
    let max_l = log_w.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if max_l == f64::NEG_INFINITY || max_l.is_nan() {
        return Err(BpError::DegenerateMessage);
    }
    let shift = if max_l < LOG_UNDERFLOW_GUARD { max_l } else { 0.0 };
    Ok(log_w.iter().map(|l| (l - shift).exp()).collect())
}

/// Multiply prediction weights by all incoming messages (Hadamard product
/// across messages, per particle index). Particles are unchanged.
pub fn update_weights(
    pred_belief: &ParticleBelief,
    incoming: &[EdgeMessage],
) -> Result<ParticleBelief, BpError> {
    let values: Vec<&[f64]> = incoming.iter().map(|m| m.values.as_slice()).collect();
    let weights = product_update(&pred_belief.weights, &values)?;
    ParticleBelief::new(pred_belief.particles.clone(), weights)
}

/// Divide weights by their sum.
pub fn normalize(belief: &ParticleBelief) -> Result<ParticleBelief, BpError> {
    let sum: f64 = belief.weights.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(BpError::DegenerateMessage);
    }
    let weights: Vec<f64> = belief.weights.iter().map(|w| w / sum).collect();
    Ok(ParticleBelief { particles: belief.particles.clone(), weights, normalized: true })
}

/// Weighted mean and weighted outer-product covariance.
///
/// The covariance is built from its upper triangle and mirrored, so it is
/// symmetric exactly.
pub fn summarize(belief: &ParticleBelief) -> GaussianSummary {
    assert!(belief.is_normalized(), "summarize requires a normalized belief");
    let mut mean = [0.0; 4];
    for (p, w) in belief.particles.iter().zip(&belief.weights) {
        for i in 0..4 {
            mean[i] += w * p[i];
        }
    }
    let mut cov = [[0.0; 4]; 4];
    for (p, w) in belief.particles.iter().zip(&belief.weights) {
        let d: Vec4 = std::array::from_fn(|i| p[i] - mean[i]);
        for i in 0..4 {
            for j in i..4 {
                cov[i][j] += w * d[i] * d[j];
            }
        }
    }
    for i in 0..4 {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    GaussianSummary { mean, covariance: cov }
}

/// Systematic resampling: `k` draws with one shared uniform offset, output
/// weights all 1/k.
pub fn resample<R: Rng>(belief: &ParticleBelief, rng: &mut R) -> ParticleBelief {
    assert!(belief.is_normalized(), "resample requires a normalized belief");
    let k = belief.len();
    let mut offset: f64 = rng.random();
    while offset == 0.0 {
        offset = rng.random();
    }
    let mut particles = Vec::with_capacity(k);
    let mut idx = 0usize;
    let mut cum = belief.weights[0];
    for m in 0..k {
        let u = (m as f64 + offset) / k as f64;
        while u > cum && idx < k - 1 {
            idx += 1;
            cum += belief.weights[idx];
        }
        particles.push(belief.particles[idx]);
    }
    let w = 1.0 / k as f64;
    ParticleBelief { particles, weights: vec![w; k], normalized: true }
}

/// Directed edges feeding one update round, with cached likelihoods.
pub(crate) struct EdgeContext {
    /// `(sender, receiver)` pairs, grouped by receiver, senders ascending.
    pub edges: Vec<(usize, usize)>,
    /// Per-edge, per-particle-index likelihood values.
    pub likelihoods: Vec<Vec<f64>>,
}

/// Hook that lets a caller transform the raw BP messages of each round
/// before the weight update; the identity refiner yields plain BP.
pub(crate) trait MessageRefiner {
    /// Whether edges into anchors must be included in the context.
    fn wants_anchor_edges(&self) -> bool {
        false
    }

    /// Called once after prediction, before the first round.
    fn begin(&mut self, _pred: &[ParticleBelief], _ctx: &EdgeContext) -> Result<(), BpError> {
        Ok(())
    }

    /// Map raw message values (aligned with `ctx.edges`) to refined values.
    fn refine(
        &mut self,
        t: usize,
        ctx: &EdgeContext,
        bp_values: Vec<Vec<f64>>,
    ) -> Result<Vec<Vec<f64>>, BpError>;
}

pub(crate) struct IdentityRefiner;

impl MessageRefiner for IdentityRefiner {
    fn refine(
        &mut self,
        _t: usize,
        _ctx: &EdgeContext,
        bp_values: Vec<Vec<f64>>,
    ) -> Result<Vec<Vec<f64>>, BpError> {
        Ok(bp_values)
    }
}

/// Result of one time step over the whole network.
#[derive(Clone, Debug)]
pub struct TimeStepOutput {
    /// Normalized post-update beliefs (before resampling).
    pub posterior: Vec<ParticleBelief>,
    /// Resampled beliefs to carry into the next time step.
    pub resampled: Vec<ParticleBelief>,
    /// Moments of the posterior beliefs.
    pub summaries: Vec<GaussianSummary>,
}

/// Shared prediction/update/finalize pipeline for BP and refined BP.
pub(crate) fn time_step_core<R: MessageRefiner>(
    beliefs: &[ParticleBelief],
    slice: &StepSlice,
    iterations: usize,
    motion: &MotionModel,
    refiner: &mut R,
    root: StreamRoot,
    measurement: &MeasurementModel,
) -> Result<TimeStepOutput, BpError> {
    let n = beliefs.len();
    let num_mobile = slice.num_mobile;
    let step = slice.step as u64;
    assert!(n >= num_mobile && slice.neighbors.len() == n, "belief/topology mismatch");
    let k = beliefs[0].len();
    for b in beliefs {
        if b.len() != k {
            return Err(BpError::ParticleCountMismatch(b.len(), k));
        }
        if !b.is_normalized() {
            return Err(BpError::NotNormalized);
        }
    }

    // prediction; anchors have a delta transition and keep their belief
    let mut pred: Vec<ParticleBelief> = Vec::with_capacity(n);
    for (i, belief) in beliefs.iter().enumerate() {
        if i >= num_mobile {
            pred.push(belief.clone());
        } else {
            let mut rng = root.stream(StreamPurpose::PredictMotion, &[i as u64, step]);
            pred.push(predict(belief, motion, &mut rng)?);
        }
    }

    // directed edges into mobile nodes (and into anchors when the refiner
    // needs their attributes), with likelihoods cached across rounds
    let receiver_limit = if refiner.wants_anchor_edges() { n } else { num_mobile };
    let mut edges = Vec::new();
    for i in 0..receiver_limit {
        let mut senders = slice.neighbors[i].clone();
        senders.sort_unstable();
        for j in senders {
            edges.push((j, i));
        }
    }
    let mut likelihoods = Vec::with_capacity(edges.len());
    for &(j, i) in &edges {
        let z = slice
            .measurements
            .get(j, i)
            .unwrap_or_else(|| panic!("missing measurement {j} -> {i} at step {step}"));
        let lik: Vec<f64> = (0..k)
            .map(|p| range_likelihood(z, pred[j].position(p), pred[i].position(p), measurement.range_noise_std))
            .collect();
        likelihoods.push(lik);
    }
    let ctx = EdgeContext { edges, likelihoods };
    refiner.begin(&pred, &ctx)?;

    // synchronous rounds; omega holds the latest unnormalized weights
    let mut omega: Vec<Vec<f64>> = pred.iter().map(|b| b.weights.clone()).collect();
    for t in 1..=iterations {
        let bp_values: Vec<Vec<f64>> = ctx
            .edges
            .iter()
            .zip(&ctx.likelihoods)
            .map(|(&(j, _), lik)| {
                lik.iter().zip(&omega[j]).map(|(l, w)| l * w).collect::<Vec<f64>>()
            })
            .collect();
        let refined = refiner.refine(t, &ctx, bp_values)?;
        debug_assert_eq!(refined.len(), ctx.edges.len());

        let mut next = omega.clone();
        for i in 0..num_mobile {
            let incoming: Vec<&[f64]> = ctx
                .edges
                .iter()
                .enumerate()
                .filter(|(_, &(_, recv))| recv == i)
                .map(|(e, _)| refined[e].as_slice())
                .collect();
            if incoming.is_empty() {
                next[i] = pred[i].weights.clone();
                continue;
            }
            match product_update(&pred[i].weights, &incoming) {
                Ok(w) => next[i] = w,
                Err(BpError::DegenerateMessage) => {
                    log::warn!(
                        "degenerate weights for agent {i} at step {step} round {t}; \
                         keeping prediction weights"
                    );
                    next[i] = pred[i].weights.clone();
                }
                Err(e) => return Err(e),
            }
        }
        omega = next;
    }

    // finalize: normalize, summarize, resample
    let mut posterior = Vec::with_capacity(n);
    let mut resampled = Vec::with_capacity(n);
    let mut summaries = Vec::with_capacity(n);
    for i in 0..n {
        let post = if i >= num_mobile {
            pred[i].clone()
        } else {
            let unnorm = ParticleBelief::new(pred[i].particles.clone(), omega[i].clone())?;
            match normalize(&unnorm) {
                Ok(b) => b,
                Err(BpError::DegenerateMessage) => {
                    log::warn!(
                        "degenerate posterior for agent {i} at step {step}; \
                         keeping prediction weights"
                    );
                    normalize(&pred[i])?
                }
                Err(e) => return Err(e),
            }
        };
        summaries.push(summarize(&post));
        if i >= num_mobile {
            resampled.push(post.clone());
        } else {
            let mut rng = root.stream(StreamPurpose::Resample, &[i as u64, step]);
            resampled.push(resample(&post, &mut rng));
        }
        posterior.push(post);
    }
    Ok(TimeStepOutput { posterior, resampled, summaries })
}

/// One full BP time step: prediction, `iterations` synchronous message
/// passing rounds, normalization, moment extraction, and resampling.
pub fn bp_time_step(
    beliefs: &[ParticleBelief],
    slice: &StepSlice,
    iterations: usize,
    motion: &MotionModel,
    measurement: &MeasurementModel,
    root: StreamRoot,
) -> Result<TimeStepOutput, BpError> {
    time_step_core(beliefs, slice, iterations, motion, &mut IdentityRefiner, root, measurement)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mat4_from_diag;
    use crate::scenario::{
        generate_realization, MeasurementModel, MotionModel, Rect, ScenarioConfig,
    };

    fn test_rng(tag: u64) -> rand_chacha::ChaCha12Rng {
        StreamRoot(tag).stream(StreamPurpose::BeliefInit, &[0])
    }

    fn uniform_belief(particles: Vec<Vec4>) -> ParticleBelief {
        let k = particles.len();
        ParticleBelief::new(particles, vec![1.0 / k as f64; k]).unwrap()
    }

    #[test]
    fn predict_carries_weights() {
        let b = ParticleBelief::new(vec![[0.0; 4], [1.0, 0.0, 0.0, 0.0]], vec![0.5, 0.5]).unwrap();
        let model = MotionModel { time_step: 1.0, drag_factor: 0.95, accel_noise_std: 0.05 };
        let out = predict(&b, &model, &mut test_rng(0)).unwrap();
        assert_eq!(out.weights(), b.weights());
    }

    #[test]
    fn predict_is_identity_at_rest_without_noise() {
        let b = uniform_belief(vec![[2.0, 3.0, 0.0, 0.0]; 4]);
        let model = MotionModel { time_step: 1.0, drag_factor: 1.0, accel_noise_std: 0.0 };
        let out = predict(&b, &model, &mut test_rng(1)).unwrap();
        assert_eq!(out.particles(), b.particles());
    }

    #[test]
    fn predict_rejects_unnormalized() {
        let b = ParticleBelief::new(vec![[0.0; 4], [0.0; 4]], vec![1.0, 1.0]).unwrap();
        let model = MotionModel { time_step: 1.0, drag_factor: 1.0, accel_noise_std: 0.0 };
        assert!(matches!(predict(&b, &model, &mut test_rng(2)), Err(BpError::NotNormalized)));
    }

    #[test]
    fn predict_mean_matches_transition() {
        let k = 100_000;
        let b = uniform_belief(vec![[0.0, 0.0, 1.0, 0.0]; k]);
        let sigma_a = 0.5;
        let model = MotionModel { time_step: 1.0, drag_factor: 1.0, accel_noise_std: sigma_a };
        let out = predict(&b, &model, &mut test_rng(3)).unwrap();
        let mean_x: f64 = out.particles().iter().map(|p| p[0]).sum::<f64>() / k as f64;
        let mean_y: f64 = out.particles().iter().map(|p| p[1]).sum::<f64>() / k as f64;
        assert!((mean_x - 1.0).abs() < 0.01 * sigma_a, "mean_x {mean_x}");
        assert!(mean_y.abs() < 0.01 * sigma_a, "mean_y {mean_y}");
    }

    #[test]
    fn init_belief_point_mass_and_uniform_weights() {
        let mean = [1.0, 2.0, 3.0, 4.0];
        let b = init_belief(mean, &[[0.0; 4]; 4], 4, &mut test_rng(4)).unwrap();
        assert!(b.particles().iter().all(|p| *p == mean));
        assert_eq!(b.weights(), &[0.25; 4]);
        assert!(b.is_normalized());
    }

    #[test]
    fn init_belief_sample_covariance() {
        let cov = mat4_from_diag([10.0, 10.0, 0.01, 0.01]);
        let k = 100_000;
        let b = init_belief([0.0; 4], &cov, k, &mut test_rng(5)).unwrap();
        for dim in 0..4 {
            let mean: f64 = b.particles().iter().map(|p| p[dim]).sum::<f64>() / k as f64;
            let var: f64 =
                b.particles().iter().map(|p| (p[dim] - mean).powi(2)).sum::<f64>() / k as f64;
            let target = cov[dim][dim];
            assert!((var - target).abs() < 0.05 * target, "dim {dim}: var {var}");
        }
    }

    #[test]
    fn init_belief_rejects_indefinite() {
        let cov = mat4_from_diag([1.0, -1.0, 1.0, 1.0]);
        assert!(matches!(
            init_belief([0.0; 4], &cov, 8, &mut test_rng(6)),
            Err(BpError::BadCovariance)
        ));
    }

    #[test]
    fn range_likelihood_values() {
        let peak = range_likelihood(5.0, [0.0, 0.0], [3.0, 4.0], 1.0);
        assert!((peak - 0.3989422804014327).abs() < 1e-12);
        let off = range_likelihood(7.0, [0.0, 0.0], [3.0, 4.0], 1.0);
        assert!((off - 0.3989422804014327 * (-2.0f64).exp()).abs() < 1e-12);
        let plus = range_likelihood(7.0, [0.0, 0.0], [3.0, 4.0], 1.0);
        let minus = range_likelihood(3.0, [0.0, 0.0], [3.0, 4.0], 1.0);
        assert_eq!(plus, minus);
    }

    #[test]
    fn edge_message_composition() {
        let sender = ParticleBelief::new(vec![[0.0, 0.0, 0.0, 0.0]], vec![1.0]).unwrap();
        let receiver = ParticleBelief::new(vec![[3.0, 4.0, 0.0, 0.0]], vec![1.0]).unwrap();
        let model = MeasurementModel { range_noise_std: 1.0, connectivity_radius: 20.0 };
        let msg = compute_edge_message(&sender, &receiver, 5.0, &model, 0, 1).unwrap();
        assert!((msg.values[0] - 0.3989422804014327).abs() < 1e-12);
    }

    #[test]
    fn edge_message_zero_sender_weights_zeroes_values() {
        let sender = ParticleBelief::new(vec![[0.0; 4], [0.0; 4]], vec![0.0, 0.0]).unwrap();
        let receiver = uniform_belief(vec![[3.0, 4.0, 0.0, 0.0]; 2]);
        let model = MeasurementModel { range_noise_std: 1.0, connectivity_radius: 20.0 };
        let msg = compute_edge_message(&sender, &receiver, 5.0, &model, 0, 1).unwrap();
        assert_eq!(msg.values, vec![0.0, 0.0]);
        let pred = uniform_belief(vec![[3.0, 4.0, 0.0, 0.0]; 2]);
        assert!(matches!(update_weights(&pred, &[msg]), Err(BpError::DegenerateMessage)));
    }

    #[test]
    fn edge_message_count_mismatch() {
        let sender = uniform_belief(vec![[0.0; 4]; 2]);
        let receiver = uniform_belief(vec![[0.0; 4]; 3]);
        let model = MeasurementModel { range_noise_std: 1.0, connectivity_radius: 20.0 };
        assert!(matches!(
            compute_edge_message(&sender, &receiver, 5.0, &model, 0, 1),
            Err(BpError::ParticleCountMismatch(2, 3))
        ));
    }

    #[test]
    fn update_weights_direct_product() {
        let pred = ParticleBelief::new(vec![[0.0; 4]], vec![0.5]).unwrap();
        let m1 = EdgeMessage { source: 1, target: 0, values: vec![0.2] };
        let m2 = EdgeMessage { source: 2, target: 0, values: vec![0.4] };
        let out = update_weights(&pred, &[m1, m2]).unwrap();
        assert!((out.weights()[0] - 0.04).abs() < 0.04 * 1e-12);
    }

    #[test]
    fn update_weights_empty_is_identity() {
        let pred = ParticleBelief::new(vec![[0.0; 4]; 3], vec![0.2, 0.3, 0.5]).unwrap();
        let out = update_weights(&pred, &[]).unwrap();
        assert_eq!(out.weights(), pred.weights());
        assert_eq!(out.particles(), pred.particles());
    }

    #[test]
    fn update_weights_matches_bruteforce_oracle() {
        let k = 4;
        let pred_w = [0.1, 0.4, 0.3, 0.2];
        let msgs = [
            vec![0.5, 0.01, 0.2, 0.9],
            vec![0.3, 0.7, 0.001, 0.4],
            vec![0.9, 0.2, 0.5, 0.05],
        ];
        let pred = ParticleBelief::new(vec![[0.0; 4]; k], pred_w.to_vec()).unwrap();
        let incoming: Vec<EdgeMessage> = msgs
            .iter()
            .enumerate()
            .map(|(s, values)| EdgeMessage { source: s + 1, target: 0, values: values.clone() })
            .collect();
        let out = update_weights(&pred, &incoming).unwrap();
        for idx in 0..k {
            let mut expected = pred_w[idx];
            for m in &msgs {
                expected *= m[idx];
            }
            let got = out.weights()[idx];
            assert!((got - expected).abs() <= expected * 1e-12, "idx {idx}: {got} vs {expected}");
        }
    }

    #[test]
    fn update_weights_rescales_only_on_underflow() {
        let k = 2;
        let pred = uniform_belief(vec![[0.0; 4]; k]);
        // products of many tiny values would underflow exp() directly
        let tiny = vec![1e-60; k];
        let msgs: Vec<EdgeMessage> = (0..6)
            .map(|s| EdgeMessage { source: s, target: 9, values: tiny.clone() })
            .collect();
        let out = update_weights(&pred, &msgs).unwrap();
        assert!(out.weights().iter().all(|w| *w > 0.0), "guard must avoid 0");
        let normalized = normalize(&out).unwrap();
        assert!((normalized.weights()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let b = ParticleBelief::new(vec![[0.0; 4]; 2], vec![2.0, 2.0]).unwrap();
        assert_eq!(normalize(&b).unwrap().weights(), &[0.5, 0.5]);
        let b = ParticleBelief::new(vec![[0.0; 4]; 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(normalize(&b).unwrap().weights(), &[1.0, 0.0, 0.0, 0.0]);
        let b = ParticleBelief::new(vec![[0.0; 4]; 2], vec![0.04, 0.12]).unwrap();
        let n = normalize(&b).unwrap();
        assert!((n.weights()[0] - 0.25).abs() < 1e-15);
        assert!((n.weights()[1] - 0.75).abs() < 1e-15);
        let zero = ParticleBelief::new(vec![[0.0; 4]; 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(normalize(&zero), Err(BpError::DegenerateMessage)));
    }

    #[test]
    fn summarize_two_point_mass() {
        let b = ParticleBelief::new(
            vec![[0.0, 0.0, 0.0, 0.0], [2.0, 2.0, 0.0, 0.0]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let s = summarize(&b);
        assert_eq!(s.position_mean(), [1.0, 1.0]);
        let b = ParticleBelief::new(
            vec![[-1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let s = summarize(&b);
        assert_eq!(s.position_cov(), [[1.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn summarize_matches_weighted_moment_oracle() {
        let k = 100;
        let mut rng = test_rng(7);
        let particles: Vec<Vec4> =
            (0..k).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let b = ParticleBelief::new(particles.clone(), weights.clone()).unwrap();
        let s = summarize(&b);

        // independent two-pass computation
        let mut mean = [0.0f64; 4];
        for (p, w) in particles.iter().zip(&weights) {
            for i in 0..4 {
                mean[i] += w * p[i];
            }
        }
        let mut cov = [[0.0f64; 4]; 4];
        for (p, w) in particles.iter().zip(&weights) {
            for i in 0..4 {
                for j in 0..4 {
                    cov[i][j] += w * (p[i] - mean[i]) * (p[j] - mean[j]);
                }
            }
        }
        for i in 0..4 {
            assert!((s.mean[i] - mean[i]).abs() <= mean[i].abs().max(1.0) * 1e-12);
            for j in 0..4 {
                assert!((s.covariance[i][j] - cov[i][j]).abs() <= cov[i][j].abs().max(1.0) * 1e-12);
            }
        }
        assert_eq!(crate::linalg::mat4_max_abs_asymmetry(&s.covariance), 0.0);
    }

    #[test]
    fn resample_point_mass() {
        let particles = vec![[1.0, 0.0, 0.0, 0.0], [2.0, 0.0, 0.0, 0.0], [3.0, 0.0, 0.0, 0.0]];
        let mut weights = vec![0.0; 3];
        weights[0] = 1.0;
        let b = ParticleBelief::new(particles, weights).unwrap();
        let out = resample(&b, &mut test_rng(8));
        assert!(out.particles().iter().all(|p| *p == [1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn resample_uniform_preserves_multiset() {
        let particles: Vec<Vec4> = (0..8).map(|i| [i as f64, 0.0, 0.0, 0.0]).collect();
        let b = uniform_belief(particles.clone());
        let out = resample(&b, &mut test_rng(9));
        let mut got: Vec<f64> = out.particles().iter().map(|p| p[0]).collect();
        got.sort_by(f64::total_cmp);
        let expect: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn resample_frequencies() {
        let k = 100_000;
        let particles = vec![[1.0, 0.0, 0.0, 0.0], [2.0, 0.0, 0.0, 0.0]];
        let mut all = Vec::with_capacity(k);
        for i in 0..k {
            all.push(particles[i % 2]);
        }
        let mut weights = vec![0.0; k];
        for (i, w) in weights.iter_mut().enumerate() {
            *w = if i % 2 == 0 { 1.5 / k as f64 } else { 0.5 / k as f64 };
        }
        let b = ParticleBelief::new(all, weights).unwrap();
        let out = resample(&b, &mut test_rng(10));
        let frac =
            out.particles().iter().filter(|p| p[0] == 1.0).count() as f64 / k as f64;
        assert!((frac - 0.75).abs() < 0.005, "frac {frac}");
    }

    #[test]
    fn resample_preserves_mean() {
        let k = 4000;
        let mut rng = test_rng(11);
        let particles: Vec<Vec4> =
            (0..k).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let b = ParticleBelief::new(particles, weights).unwrap();
        let before = summarize(&b);
        let out = resample(&b, &mut rng);
        let after = summarize(&out);
        for i in 0..4 {
            let std = before.covariance[i][i].sqrt();
            let tol = 3.0 * std / (k as f64).sqrt();
            assert!(
                (after.mean[i] - before.mean[i]).abs() <= tol,
                "dim {i}: {} vs {} (tol {tol})",
                after.mean[i],
                before.mean[i]
            );
        }
    }

    fn small_scenario(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            num_agents: 2,
            num_steps: 3,
            area: Rect::square(0.0, 40.0),
            placement_area: Rect::square(10.0, 30.0),
            anchors: vec![[20.0, 20.0]],
            init_velocity_std: 0.1,
            prior_cov_diag: [10.0, 10.0, 0.01, 0.01],
            motion: MotionModel { time_step: 1.0, drag_factor: 0.95, accel_noise_std: 0.05 },
            measurement: MeasurementModel { range_noise_std: 1.0, connectivity_radius: 40.0 },
            rng_seed: seed,
            symmetric_measurements: false,
        }
    }

    #[test]
    fn isolated_agent_posterior_equals_prediction() {
        let mut config = small_scenario(3);
        config.measurement.connectivity_radius = 1e-6; // no edges form
        let real = generate_realization(&config).unwrap();
        let root = StreamRoot(99);
        let k = 8;
        let beliefs: Vec<ParticleBelief> = real
            .priors
            .iter()
            .enumerate()
            .map(|(i, p)| {
                belief_from_prior(p, k, &mut root.stream(StreamPurpose::BeliefInit, &[i as u64]))
                    .unwrap()
            })
            .collect();
        let slice = real.slice(1);
        let out =
            bp_time_step(&beliefs, &slice, 1, &config.motion, &config.measurement, root).unwrap();
        // with no incoming messages the posterior is the (re)normalized prediction
        for i in 0..real.num_mobile {
            let mut rng = root.stream(StreamPurpose::PredictMotion, &[i as u64, 1]);
            let pred = predict(&beliefs[i], &config.motion, &mut rng).unwrap();
            assert_eq!(out.posterior[i].particles(), pred.particles());
            assert_eq!(out.posterior[i].weights(), pred.weights());
        }
    }

    #[test]
    fn processing_order_does_not_change_results() {
        let config = small_scenario(11);
        let real = generate_realization(&config).unwrap();
        let root = StreamRoot(5);
        let k = 16;
        let beliefs: Vec<ParticleBelief> = real
            .priors
            .iter()
            .enumerate()
            .map(|(i, p)| {
                belief_from_prior(p, k, &mut root.stream(StreamPurpose::BeliefInit, &[i as u64]))
                    .unwrap()
            })
            .collect();
        // permute stored neighbor order; the schedule must canonicalize it
        let mut shuffled = real.clone();
        for rec in &mut shuffled.steps {
            for nbrs in &mut rec.neighbors {
                nbrs.reverse();
            }
        }
        let a = bp_time_step(&beliefs, &real.slice(1), 2, &config.motion, &config.measurement, root)
            .unwrap();
        let b = bp_time_step(
            &beliefs,
            &shuffled.slice(1),
            2,
            &config.motion,
            &config.measurement,
            root,
        )
        .unwrap();
        for (x, y) in a.posterior.iter().zip(&b.posterior) {
            assert_eq!(x.weights(), y.weights());
            assert_eq!(x.particles(), y.particles());
        }
    }

    #[test]
    fn trilateration_recovers_position() {
        // one mobile agent, three anchors in range, near-exact ranges
        let sigma_r = 0.1;
        let truth = [20.0, 18.0];
        let anchors = [[10.0, 10.0], [30.0, 10.0], [20.0, 30.0]];
        let k = 200_000;
        let root = StreamRoot(17);

        let prior_cov = mat4_from_diag([10.0, 10.0, 0.01, 0.01]);
        let prior_mean = [21.0, 16.5, 0.0, 0.0];
        let mut beliefs = vec![init_belief(
            prior_mean,
            &prior_cov,
            k,
            &mut root.stream(StreamPurpose::BeliefInit, &[0]),
        )
        .unwrap()];
        for a in anchors {
            beliefs.push(
                belief_from_prior(
                    &Prior::Point { state: AgentState::new(a, [0.0, 0.0]) },
                    k,
                    &mut test_rng(0),
                )
                .unwrap(),
            );
        }

        let motion = MotionModel { time_step: 1.0, drag_factor: 1.0, accel_noise_std: 0.0 };
        let measurement = MeasurementModel { range_noise_std: sigma_r, connectivity_radius: 40.0 };
        let truth_states: Vec<AgentState> = std::iter::once(AgentState::new(truth, [0.0, 0.0]))
            .chain(anchors.iter().map(|a| AgentState::new(*a, [0.0, 0.0])))
            .collect();
        let neighbors = vec![vec![1, 2, 3], vec![0], vec![0], vec![0]];
        let measurements: Vec<crate::scenario::RangeMeasurement> = (1..4)
            .flat_map(|a| {
                let d = dist2(truth, anchors[a - 1]);
                [
                    crate::scenario::RangeMeasurement { sender: a, receiver: 0, range: d },
                    crate::scenario::RangeMeasurement { sender: 0, receiver: a, range: d },
                ]
            })
            .collect();
        let index = crate::scenario::MeasurementIndex::build(&measurements);
        let slice = StepSlice {
            step: 1,
            num_mobile: 1,
            truth: &truth_states,
            neighbors: &neighbors,
            measurements: index,
        };
        let out = bp_time_step(&beliefs, &slice, 1, &motion, &measurement, root).unwrap();
        let est = out.summaries[0].position_mean();
        let err = dist2(est, truth);
        assert!(err < 0.1, "estimate {est:?} truth {truth:?} err {err}");

        // grid-search oracle over the position prior times the range rings
        let mut num = [0.0f64; 2];
        let mut den = 0.0f64;
        let cells = 400;
        let span = 10.0;
        for gx in 0..cells {
            for gy in 0..cells {
                let x = prior_mean[0] - span + 2.0 * span * (gx as f64 + 0.5) / cells as f64;
                let y = prior_mean[1] - span + 2.0 * span * (gy as f64 + 0.5) / cells as f64;
                let prior = (-0.5 * ((x - prior_mean[0]).powi(2) / 10.0 + (y - prior_mean[1]).powi(2) / 10.0)).exp();
                let mut lik = prior;
                for a in anchors {
                    let d = dist2(truth, a);
                    lik *= range_likelihood(d, a, [x, y], sigma_r);
                }
                num[0] += x * lik;
                num[1] += y * lik;
                den += lik;
            }
        }
        let oracle = [num[0] / den, num[1] / den];
        assert!(dist2(est, oracle) < 0.05, "estimate {est:?} oracle {oracle:?}");
    }

    #[test]
    fn weights_stay_nonnegative_through_pipeline() {
        let config = small_scenario(23);
        let real = generate_realization(&config).unwrap();
        let root = StreamRoot(23);
        let k = 64;
        let mut beliefs: Vec<ParticleBelief> = real
            .priors
            .iter()
            .enumerate()
            .map(|(i, p)| {
                belief_from_prior(p, k, &mut root.stream(StreamPurpose::BeliefInit, &[i as u64]))
                    .unwrap()
            })
            .collect();
        for step in 1..real.num_steps() {
            let out = bp_time_step(
                &beliefs,
                &real.slice(step),
                2,
                &config.motion,
                &config.measurement,
                root,
            )
            .unwrap();
            for b in &out.posterior {
                assert!(b.weights().iter().all(|w| *w >= 0.0 && w.is_finite()));
            }
            beliefs = out.resampled;
        }
    }

    #[test]
    fn posterior_mean_converges_with_particle_count() {
        // single agent with one anchor neighbor: compare against a dense grid
        let sigma_r = 1.0;
        let anchor = [0.0, 0.0];
        let truth = [6.0, 0.0];
        let z = 6.0;
        let prior_mean = [6.5, 0.8, 0.0, 0.0];
        let prior_cov = mat4_from_diag([4.0, 4.0, 0.01, 0.01]);

        // dense-grid oracle for the position posterior
        let mut num = [0.0f64; 2];
        let mut den = 0.0f64;
        let cells = 600;
        let span = 8.0;
        for gx in 0..cells {
            for gy in 0..cells {
                let x = prior_mean[0] - span + 2.0 * span * (gx as f64 + 0.5) / cells as f64;
                let y = prior_mean[1] - span + 2.0 * span * (gy as f64 + 0.5) / cells as f64;
                let prior = (-0.5
                    * ((x - prior_mean[0]).powi(2) / prior_cov[0][0]
                        + (y - prior_mean[1]).powi(2) / prior_cov[1][1]))
                    .exp();
                let lik = range_likelihood(z, anchor, [x, y], sigma_r);
                let post = prior * lik;
                num[0] += x * post;
                num[1] += y * post;
                den += post;
            }
        }
        let oracle = [num[0] / den, num[1] / den];

        let mut errors = Vec::new();
        for &k in &[100usize, 1000, 10_000] {
            let mut rng = test_rng(31);
            let belief = init_belief(prior_mean, &prior_cov, k, &mut rng).unwrap();
            let lik: Vec<f64> = (0..k)
                .map(|p| range_likelihood(z, anchor, belief.position(p), sigma_r))
                .collect();
            let pred = belief.weights().to_vec();
            let weights: Vec<f64> = pred.iter().zip(&lik).map(|(w, l)| w * l).collect();
            let b = ParticleBelief::new(belief.particles().to_vec(), weights).unwrap();
            let post = normalize(&b).unwrap();
            let s = summarize(&post);
            errors.push(dist2(s.position_mean(), oracle));
        }
        assert!(
            errors[2] < errors[0],
            "error should shrink with K: {errors:?} (truth {truth:?})"
        );
    }
}
