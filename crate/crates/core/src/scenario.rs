//! Scenario generation: ground-truth trajectories, connectivity graphs,
//! pairwise range measurements, and initial priors.
//!
//! A network has `num_mobile` mobile agents (node ids `0..num_mobile`) and a
//! set of static anchors appended after them. Mobile agents follow a
//! constant-velocity model with drag,
//!
//! ```text
//! v_n = rho * v_{n-1} + a * dt,   a ~ N(0, sigma_a^2 I_2)
//! p_n = p_{n-1} + dt * v_n
//! ```
//!
//! and any two nodes within the connectivity radius measure their mutual
//! distance corrupted by zero-mean Gaussian noise, independently per
//! direction. Time step 0 carries the initial states and priors only;
//! measurements start at step 1.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dist2, lower_tri_mul, mat4_from_diag, Mat4, Vec2, Vec4};
use crate::rng::{StreamPurpose, StreamRoot};

/// Current on-disk schema for [`Realization`] files.
pub const REALIZATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("placement area is degenerate (zero width or height)")]
    EmptyArea,
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("realization fails invariant: {0}")]
    InvalidRealization(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Position and velocity of one agent at one time step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentState {
    pub position: Vec2,
    pub velocity: Vec2,
}

impl AgentState {
    pub fn new(position: Vec2, velocity: Vec2) -> Self {
        AgentState { position, velocity }
    }

    /// State as `[px, py, vx, vy]`.
    pub fn as_vec4(&self) -> Vec4 {
        [self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }

    pub fn from_vec4(v: Vec4) -> Self {
        AgentState { position: [v[0], v[1]], velocity: [v[2], v[3]] }
    }

    pub fn is_finite(&self) -> bool {
        self.as_vec4().iter().all(|x| x.is_finite())
    }
}

/// Constant-velocity mobility model with drag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionModel {
    /// Step duration dt in seconds.
    pub time_step: f64,
    /// Velocity retention factor rho in (0, 1].
    pub drag_factor: f64,
    /// Driving acceleration noise std sigma_a, m/s^2.
    pub accel_noise_std: f64,
}

impl MotionModel {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.time_step > 0.0) {
            return Err(ScenarioError::InvalidConfig("time_step must be > 0".into()));
        }
        if !(self.drag_factor > 0.0 && self.drag_factor <= 1.0) {
            return Err(ScenarioError::InvalidConfig("drag_factor must be in (0, 1]".into()));
        }
        if !(self.accel_noise_std >= 0.0) {
            return Err(ScenarioError::InvalidConfig("accel_noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Pairwise range measurement model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementModel {
    /// Range noise std sigma_r in meters.
    pub range_noise_std: f64,
    /// Two nodes are neighbors iff their distance is <= this radius.
    pub connectivity_radius: f64,
}

impl MeasurementModel {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.range_noise_std > 0.0) {
            return Err(ScenarioError::InvalidConfig("range_noise_std must be > 0".into()));
        }
        if !(self.connectivity_radius > 0.0) {
            return Err(ScenarioError::InvalidConfig("connectivity_radius must be > 0".into()));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle `[min, max]` in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Rect { min, max }
    }

    pub fn square(lo: f64, hi: f64) -> Self {
        Rect { min: [lo, lo], max: [hi, hi] }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.max[0] > self.min[0]) || !(self.max[1] > self.min[1])
    }

    pub fn contains_rect(&self, inner: &Rect) -> bool {
        inner.min[0] >= self.min[0]
            && inner.min[1] >= self.min[1]
            && inner.max[0] <= self.max[0]
            && inner.max[1] <= self.max[1]
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Vec2 {
        [
            rng.random_range(self.min[0]..=self.max[0]),
            rng.random_range(self.min[1]..=self.max[1]),
        ]
    }
}

/// Full description of one simulated network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Number of mobile agents.
    pub num_agents: usize,
    /// Number of time steps in a track (step 0 is the initial state).
    pub num_steps: usize,
    /// Area of interest.
    pub area: Rect,
    /// Mobile agents start uniformly inside this sub-area.
    pub placement_area: Rect,
    /// Fixed anchor positions, perfectly known.
    pub anchors: Vec<Vec2>,
    /// Initial velocity std sigma_p, m/s.
    pub init_velocity_std: f64,
    /// Diagonal of the initial prior covariance, `[px, py, vx, vy]`.
    pub prior_cov_diag: Vec4,
    pub motion: MotionModel,
    pub measurement: MeasurementModel,
    pub rng_seed: u64,
    /// When true both directions of an edge share one noise draw.
    #[serde(default)]
    pub symmetric_measurements: bool,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.num_agents < 1 {
            return Err(ScenarioError::InvalidConfig("num_agents must be >= 1".into()));
        }
        if self.num_steps < 1 {
            return Err(ScenarioError::InvalidConfig("num_steps must be >= 1".into()));
        }
        if self.placement_area.is_degenerate() {
            return Err(ScenarioError::EmptyArea);
        }
        if !self.area.contains_rect(&self.placement_area) {
            return Err(ScenarioError::InvalidConfig(
                "placement_area must lie inside area".into(),
            ));
        }
        if !(self.init_velocity_std >= 0.0) {
            return Err(ScenarioError::InvalidConfig("init_velocity_std must be >= 0".into()));
        }
        if self.prior_cov_diag.iter().any(|&d| !(d > 0.0)) {
            return Err(ScenarioError::InvalidConfig(
                "prior_cov_diag entries must be > 0".into(),
            ));
        }
        for (i, a) in self.anchors.iter().enumerate() {
            if !a.iter().all(|x| x.is_finite()) {
                return Err(ScenarioError::InvalidConfig(format!("anchor {i} not finite")));
            }
        }
        self.motion.validate()?;
        self.measurement.validate()?;
        Ok(())
    }

    /// Mobile agents plus anchors.
    pub fn num_nodes(&self) -> usize {
        self.num_agents + self.anchors.len()
    }

    /// 25 mobile agents, 5 anchors (corners and center of a 60 m square),
    /// 50 steps. The small network used for training.
    pub fn train_small() -> Self {
        ScenarioConfig {
            num_agents: 25,
            num_steps: 50,
            area: Rect::square(0.0, 60.0),
            placement_area: Rect::square(15.0, 45.0),
            anchors: vec![[0.0, 0.0], [60.0, 0.0], [0.0, 60.0], [60.0, 60.0], [30.0, 30.0]],
            init_velocity_std: 0.1,
            prior_cov_diag: [10.0, 10.0, 0.01, 0.01],
            motion: MotionModel { time_step: 1.0, drag_factor: 0.95, accel_noise_std: 0.05 },
            measurement: MeasurementModel { range_noise_std: 1.0, connectivity_radius: 20.0 },
            rng_seed: 0,
            symmetric_measurements: false,
        }
    }

    /// 100 mobile agents, 13 anchors on a 100 m square: corners, edge
    /// midpoints, center, and four interior points offset (+-25, +-25) from
    /// the center. The larger network used to probe generalization.
    pub fn eval_large() -> Self {
        let c = 50.0;
        ScenarioConfig {
            num_agents: 100,
            num_steps: 50,
            area: Rect::square(0.0, 100.0),
            placement_area: Rect::square(10.0, 90.0),
            anchors: vec![
                [0.0, 0.0],
                [100.0, 0.0],
                [0.0, 100.0],
                [100.0, 100.0],
                [50.0, 0.0],
                [0.0, 50.0],
                [100.0, 50.0],
                [50.0, 100.0],
                [c, c],
                [c - 25.0, c - 25.0],
                [c - 25.0, c + 25.0],
                [c + 25.0, c - 25.0],
                [c + 25.0, c + 25.0],
            ],
            init_velocity_std: 0.1,
            prior_cov_diag: [10.0, 10.0, 0.01, 0.01],
            motion: MotionModel { time_step: 1.0, drag_factor: 0.95, accel_noise_std: 0.05 },
            measurement: MeasurementModel { range_noise_std: 1.0, connectivity_radius: 20.0 },
            rng_seed: 0,
            symmetric_measurements: false,
        }
    }
}

/// Initial knowledge about one node's state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum Prior {
    /// Gaussian prior for a mobile agent.
    Gaussian { mean: Vec4, cov: Mat4 },
    /// Point mass, used for anchors.
    Point { state: AgentState },
}

/// One directed range observation `sender -> receiver` at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeMeasurement {
    pub sender: usize,
    pub receiver: usize,
    pub range: f64,
}

/// Per-step ground truth, adjacency, and observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    /// True state of every node (anchors included, frozen).
    pub truth: Vec<AgentState>,
    /// Neighbor ids per node, sorted ascending.
    pub neighbors: Vec<Vec<usize>>,
    /// Exactly one measurement per direction of every adjacency edge.
    pub measurements: Vec<RangeMeasurement>,
}

/// One simulated run: trajectories, per-step topology, measurements, priors.
/// Carries the generating config so downstream inference uses the same
/// motion and measurement models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Realization {
    pub schema_version: u32,
    pub config: ScenarioConfig,
    pub num_mobile: usize,
    pub steps: Vec<StepRecord>,
    pub priors: Vec<Prior>,
}

/// Fast `(sender, receiver) -> range` lookup for one step.
pub struct MeasurementIndex {
    map: HashMap<(usize, usize), f64>,
}

impl MeasurementIndex {
    pub fn build(measurements: &[RangeMeasurement]) -> Self {
        let map = measurements.iter().map(|m| ((m.sender, m.receiver), m.range)).collect();
        MeasurementIndex { map }
    }

    pub fn get(&self, sender: usize, receiver: usize) -> Option<f64> {
        self.map.get(&(sender, receiver)).copied()
    }
}

/// Borrowed view of one time step of a realization.
pub struct StepSlice<'a> {
    pub step: usize,
    pub num_mobile: usize,
    pub truth: &'a [AgentState],
    pub neighbors: &'a [Vec<usize>],
    pub measurements: MeasurementIndex,
}

impl Realization {
    pub fn num_nodes(&self) -> usize {
        self.priors.len()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn is_anchor(&self, node: usize) -> bool {
        node >= self.num_mobile
    }

    pub fn slice(&self, step: usize) -> StepSlice<'_> {
        let rec = &self.steps[step];
        StepSlice {
            step,
            num_mobile: self.num_mobile,
            truth: &rec.truth,
            neighbors: &rec.neighbors,
            measurements: MeasurementIndex::build(&rec.measurements),
        }
    }

    /// Check structural invariants: symmetric adjacency, one measurement per
    /// direction per edge, frozen anchors, matching lengths.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.config.validate()?;
        let n = self.num_nodes();
        if self.num_mobile > n || self.num_mobile != self.config.num_agents {
            return Err(ScenarioError::InvalidRealization("num_mobile inconsistent".into()));
        }
        if self.steps.is_empty() || self.steps.len() != self.config.num_steps {
            return Err(ScenarioError::InvalidRealization("step count inconsistent".into()));
        }
        let anchor_truth: Vec<AgentState> =
            self.steps[0].truth.iter().skip(self.num_mobile).copied().collect();
        for (s, rec) in self.steps.iter().enumerate() {
            if rec.truth.len() != n || rec.neighbors.len() != n {
                return Err(ScenarioError::InvalidRealization(format!(
                    "step {s}: truth/neighbors length mismatch"
                )));
            }
            for (i, nbrs) in rec.neighbors.iter().enumerate() {
                for &j in nbrs {
                    if j >= n || j == i {
                        return Err(ScenarioError::InvalidRealization(format!(
                            "step {s}: bad neighbor {j} of {i}"
                        )));
                    }
                    if !rec.neighbors[j].contains(&i) {
                        return Err(ScenarioError::InvalidRealization(format!(
                            "step {s}: adjacency not symmetric for ({i}, {j})"
                        )));
                    }
                }
            }
            let index = MeasurementIndex::build(&rec.measurements);
            let mut edge_count = 0usize;
            for (i, nbrs) in rec.neighbors.iter().enumerate() {
                edge_count += nbrs.len();
                for &j in nbrs {
                    if index.get(j, i).is_none() {
                        return Err(ScenarioError::InvalidRealization(format!(
                            "step {s}: missing measurement {j} -> {i}"
                        )));
                    }
                }
            }
            if rec.measurements.len() != edge_count {
                return Err(ScenarioError::InvalidRealization(format!(
                    "step {s}: measurement count {} != directed edge count {edge_count}",
                    rec.measurements.len()
                )));
            }
            for (a, state) in rec.truth.iter().skip(self.num_mobile).enumerate() {
                if *state != anchor_truth[a] {
                    return Err(ScenarioError::InvalidRealization(format!(
                        "step {s}: anchor {a} moved"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        let bytes = serde_json::to_vec(self)?;
        crate::fsio::atomic_write(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let bytes = std::fs::read(path)?;
        let real: Realization = serde_json::from_slice(&bytes)?;
        if real.schema_version != REALIZATION_SCHEMA_VERSION {
            return Err(ScenarioError::InvalidRealization(format!(
                "unsupported schema version {}",
                real.schema_version
            )));
        }
        Ok(real)
    }
}

/// Advance one agent state through the mobility model.
pub fn step_motion<R: Rng>(state: &AgentState, model: &MotionModel, rng: &mut R) -> AgentState {
    let ax: f64 = rng.sample(StandardNormal);
    let ay: f64 = rng.sample(StandardNormal);
    let dt = model.time_step;
    let vx = model.drag_factor * state.velocity[0] + model.accel_noise_std * ax * dt;
    let vy = model.drag_factor * state.velocity[1] + model.accel_noise_std * ay * dt;
    AgentState {
        position: [state.position[0] + dt * vx, state.position[1] + dt * vy],
        velocity: [vx, vy],
    }
}

/// Noisy range between two agents: `||p_j - p_i|| + r`, `r ~ N(0, sigma_r^2)`.
pub fn measure_range<R: Rng>(
    state_j: &AgentState,
    state_i: &AgentState,
    model: &MeasurementModel,
    rng: &mut R,
) -> f64 {
    let noise: f64 = rng.sample(StandardNormal);
    dist2(state_j.position, state_i.position) + model.range_noise_std * noise
}

/// Neighbor sets under the disk connectivity rule; `j in N_i` iff `i != j`
/// and `||p_j - p_i|| <= radius`. Symmetric, boundary inclusive.
pub fn build_topology(positions: &[Vec2], radius: f64) -> Vec<Vec<usize>> {
    let n = positions.len();
    let mut neighbors = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dist2(positions[i], positions[j]) <= radius {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    neighbors
}

/// Simulate one full realization from a config. Deterministic in
/// `config.rng_seed`.
pub fn generate_realization(config: &ScenarioConfig) -> Result<Realization, ScenarioError> {
    config.validate()?;
    let root = StreamRoot(config.rng_seed);
    let num_mobile = config.num_agents;
    let n = config.num_nodes();

    // initial states
    let mut states: Vec<AgentState> = Vec::with_capacity(n);
    for agent in 0..num_mobile {
        let mut place_rng = root.stream(StreamPurpose::Placement, &[agent as u64]);
        let position = config.placement_area.sample_uniform(&mut place_rng);
        let mut vel_rng = root.stream(StreamPurpose::InitVelocity, &[agent as u64]);
        let vx: f64 = vel_rng.sample(StandardNormal);
        let vy: f64 = vel_rng.sample(StandardNormal);
        states.push(AgentState::new(
            position,
            [config.init_velocity_std * vx, config.init_velocity_std * vy],
        ));
    }
    for anchor in &config.anchors {
        states.push(AgentState::new(*anchor, [0.0, 0.0]));
    }

    // priors
    let prior_cov = mat4_from_diag(config.prior_cov_diag);
    let chol = cholesky_of(&prior_cov)?;
    let mut priors: Vec<Prior> = Vec::with_capacity(n);
    for agent in 0..num_mobile {
        let mut rng = root.stream(StreamPurpose::PriorMean, &[agent as u64]);
        let z: Vec4 = std::array::from_fn(|_| rng.sample(StandardNormal));
        let offset = lower_tri_mul(&chol, z);
        let truth = states[agent].as_vec4();
        let mean = std::array::from_fn(|i| truth[i] + offset[i]);
        priors.push(Prior::Gaussian { mean, cov: prior_cov });
    }
    for node in num_mobile..n {
        priors.push(Prior::Point { state: states[node] });
    }

    // roll trajectories and record steps
    let mut steps: Vec<StepRecord> = Vec::with_capacity(config.num_steps);
    steps.push(StepRecord {
        truth: states.clone(),
        neighbors: vec![Vec::new(); n],
        measurements: Vec::new(),
    });
    for step in 1..config.num_steps {
        for agent in 0..num_mobile {
            let mut rng =
                root.stream(StreamPurpose::TruthMotion, &[agent as u64, step as u64]);
            states[agent] = step_motion(&states[agent], &config.motion, &mut rng);
        }
        let positions: Vec<Vec2> = states.iter().map(|s| s.position).collect();
        let neighbors = build_topology(&positions, config.measurement.connectivity_radius);
        let mut measurements = Vec::new();
        for (i, nbrs) in neighbors.iter().enumerate() {
            for &j in nbrs {
                if j < i {
                    continue; // handle each undirected pair once
                }
                let mut rng_ji = root.stream(
                    StreamPurpose::RangeNoise,
                    &[step as u64, j as u64, i as u64],
                );
                let z_ji = measure_range(&states[j], &states[i], &config.measurement, &mut rng_ji);
                let z_ij = if config.symmetric_measurements {
                    z_ji
                } else {
                    let mut rng_ij = root.stream(
                        StreamPurpose::RangeNoise,
                        &[step as u64, i as u64, j as u64],
                    );
                    measure_range(&states[i], &states[j], &config.measurement, &mut rng_ij)
                };
                measurements.push(RangeMeasurement { sender: j, receiver: i, range: z_ji });
                measurements.push(RangeMeasurement { sender: i, receiver: j, range: z_ij });
            }
        }
        steps.push(StepRecord { truth: states.clone(), neighbors, measurements });
    }

    let real = Realization {
        schema_version: REALIZATION_SCHEMA_VERSION,
        config: config.clone(),
        num_mobile,
        steps,
        priors,
    };
    debug_assert!(real.validate().is_ok());
    Ok(real)
}

fn cholesky_of(cov: &Mat4) -> Result<Mat4, ScenarioError> {
    crate::linalg::cholesky_psd(cov, 1e-9)
        .ok_or_else(|| ScenarioError::InvalidConfig("prior covariance not PSD".into()))
}
