//! Run one realization through BP or refined BP and collect scored
//! estimates.
//!
//! Step 0 has no measurements: beliefs come straight from the priors and the
//! prior moments are scored as the step-0 estimate. Every later step runs
//! one full time step of the chosen algorithm.

use thiserror::Error;

use crate::bp::{self, BpError, GaussianSummary, ParticleBelief};
use crate::eval::EvalRecord;
use crate::gnn::{self, GnnError, NebpModel};
use crate::linalg::Mat2;
use crate::rng::{StreamPurpose, StreamRoot};
use crate::scenario::Realization;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error("nebp requires a model")]
    MissingModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Bp,
    Nebp,
}

impl Algorithm {
    pub fn label(&self) -> &'static str {
        match self {
            Algorithm::Bp => "bp",
            Algorithm::Nebp => "nebp",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RolloutConfig {
    pub algorithm: Algorithm,
    pub particle_count: usize,
    /// Message passing iterations per time step (BP only; a model carries
    /// its own iteration count).
    pub iterations: usize,
}

/// Position covariance for a record, regularized if near singular so the
/// NEES quadratic form stays well posed.
pub fn record_covariance(summary: &GaussianSummary) -> Mat2 {
    let mut cov = summary.position_cov();
    let (lo, hi) = crate::linalg::mat2_sym_eigvals(&cov);
    if !(lo > 1e-9) || hi / lo.max(1e-300) > 1e10 {
        cov[0][0] += 1e-9;
        cov[1][1] += 1e-9;
    }
    cov
}

/// Beliefs drawn from the realization's priors (time step 0).
pub fn initial_beliefs(
    real: &Realization,
    particle_count: usize,
    root: StreamRoot,
) -> Result<Vec<ParticleBelief>, BpError> {
    real.priors
        .iter()
        .enumerate()
        .map(|(i, prior)| {
            let mut rng = root.stream(StreamPurpose::BeliefInit, &[i as u64]);
            bp::belief_from_prior(prior, particle_count, &mut rng)
        })
        .collect()
}

fn records_for_step(
    real: &Realization,
    realization_id: u64,
    step: usize,
    summaries: &[GaussianSummary],
    out: &mut Vec<EvalRecord>,
) {
    let truth = &real.steps[step].truth;
    for agent in 0..real.num_mobile {
        out.push(EvalRecord {
            realization: realization_id,
            agent,
            step,
            true_position: truth[agent].position,
            estimated_position: summaries[agent].position_mean(),
            position_covariance: record_covariance(&summaries[agent]),
        });
    }
}

/// Roll a realization forward and score every mobile agent at every step.
pub fn run_realization(
    real: &Realization,
    config: &RolloutConfig,
    model: Option<&NebpModel>,
    root: StreamRoot,
    realization_id: u64,
) -> Result<Vec<EvalRecord>, RolloutError> {
    if config.algorithm == Algorithm::Nebp && model.is_none() {
        return Err(RolloutError::MissingModel);
    }
    let mut beliefs = initial_beliefs(real, config.particle_count, root)?;
    let mut records = Vec::with_capacity(real.num_mobile * real.num_steps());

    let summaries: Vec<GaussianSummary> = beliefs.iter().map(bp::summarize).collect();
    records_for_step(real, realization_id, 0, &summaries, &mut records);

    let motion = &real.config.motion;
    let measurement = &real.config.measurement;
    for step in 1..real.num_steps() {
        let slice = real.slice(step);
        let out = match config.algorithm {
            Algorithm::Bp => {
                bp::bp_time_step(&beliefs, &slice, config.iterations, motion, measurement, root)?
            }
            Algorithm::Nebp => gnn::nebp_time_step(
                &beliefs,
                &slice,
                model.expect("checked above"),
                motion,
                measurement,
                root,
            )?,
        };
        records_for_step(real, realization_id, step, &out.summaries, &mut records);
        beliefs = out.resampled;
    }
    Ok(records)
}
