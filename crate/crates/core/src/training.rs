//! Training loop for the message-refinement model: dataset iteration,
//! position loss, batched gradient steps, and checkpointing.
//!
//! Each batch rolls its realizations forward step by step. Every time step
//! is recorded on its own tape, the squared position error of all mobile
//! agents is backpropagated immediately, and per-step gradients accumulate
//! over the rollout; beliefs crossing a step boundary are constants. One
//! Adam step is applied per batch with gradients averaged across batch
//! items. All randomness derives from `(seed, epoch, realization, ...)`
//! keys, so resuming from a checkpoint replays the exact stream a longer
//! run would have used.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bp::{BpError, GaussianSummary, ParticleBelief};
use crate::gnn::{nebp_time_step_traced, GnnError, NebpDims, NebpModel};
use crate::neural::{AdamConfig, AdamState, NeuralError, NodeRef, ParamId, Tape};
use crate::rng::{StreamPurpose, StreamRoot};
use crate::rollout::initial_beliefs;
use crate::scenario::{AgentState, Realization};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint i/o: {0}")]
    CheckpointIo(String),
    #[error("non-finite loss at realization {realization}, step {step}")]
    NonFiniteLoss { realization: u64, step: usize },
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the dataset.
    pub epochs: usize,
    pub particle_count: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub dataset_dir: PathBuf,
    pub checkpoint_path: PathBuf,
    pub seed: u64,
    /// Optional global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "default_msg_dim")]
    pub msg_dim: usize,
    /// Apply an optimizer step after every time step instead of once per
    /// batch of full rollouts.
    #[serde(default)]
    pub per_step_updates: bool,
    #[serde(default)]
    pub loss_trace_path: Option<PathBuf>,
}

fn default_iterations() -> usize {
    1
}

fn default_hidden_width() -> usize {
    crate::gnn::DEFAULT_HIDDEN_WIDTH
}

fn default_msg_dim() -> usize {
    crate::gnn::DEFAULT_MSG_DIM
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.particle_count < 1 || self.iterations < 1 {
            return Err(TrainError::InvalidConfig("particle_count and iterations must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> NebpDims {
        NebpDims {
            msg_dim: self.msg_dim,
            hidden_width: self.hidden_width,
            particle_count: self.particle_count,
            iterations: self.iterations,
            ..NebpDims::new(self.particle_count)
        }
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path)
            .map_err(|e| TrainError::InvalidConfig(format!("read {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| TrainError::InvalidConfig(format!("parse {}: {e}", path.display())))
    }
}

/// Model plus optimizer state plus the RNG bookkeeping needed to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub model: NebpModel,
    pub optimizer: AdamState,
    pub train_seed: u64,
    pub epochs_done: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = serde_json::to_vec(self)
            .map_err(|e| TrainError::CheckpointIo(e.to_string()))?;
        crate::fsio::atomic_write(path, &bytes)
            .map_err(|e| TrainError::CheckpointIo(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path)
            .map_err(|e| TrainError::CheckpointIo(format!("read {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| TrainError::CheckpointIo(format!("parse {}: {e}", path.display())))?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(TrainError::CheckpointIo(format!(
                "unsupported checkpoint schema {}",
                ckpt.schema_version
            )));
        }
        ckpt.model.check_consistent()?;
        Ok(ckpt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceEntry>,
}

/// Sum over agents of squared position error. Slices must already be
/// restricted to mobile agents and aligned.
pub fn position_loss(summaries: &[GaussianSummary], truth: &[AgentState]) -> f64 {
    assert_eq!(summaries.len(), truth.len(), "agent sets must match");
    summaries
        .iter()
        .zip(truth)
        .map(|(s, t)| {
            let p = s.position_mean();
            let dx = p[0] - t.position[0];
            let dy = p[1] - t.position[1];
            dx * dx + dy * dy
        })
        .sum()
}

/// Squared-position-error loss node over all mobile agents of one step.
fn step_loss_node(
    tape: &mut Tape,
    estimates: &[Option<(NodeRef, NodeRef)>],
    truth: &[AgentState],
) -> Option<NodeRef> {
    let mut total: Option<NodeRef> = None;
    for (i, est) in estimates.iter().enumerate() {
        let Some((ex, ey)) = est else { continue };
        let tx = tape.scalar(truth[i].position[0]);
        let ty = tape.scalar(truth[i].position[1]);
        let dx = tape.sub(*ex, tx);
        let dy = tape.sub(*ey, ty);
        let dx2 = tape.mul(dx, dx);
        let dy2 = tape.mul(dy, dy);
        let term = tape.add(dx2, dy2);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    total
}

/// Roll one realization with per-step tapes; returns the summed loss and
/// flat accumulated gradients.
fn rollout_gradients(
    real: &Realization,
    realization_id: u64,
    model: &NebpModel,
    layout: &[(ParamId, usize, usize)],
    num_params: usize,
    root: StreamRoot,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut grads = vec![0.0; num_params];
    let mut loss_total = 0.0;
    let mut beliefs: Vec<ParticleBelief> =
        initial_beliefs(real, model.dims.particle_count, root)?;
    for step in 1..real.num_steps() {
        let slice = real.slice(step);
        let mut tape = Tape::new();
        let traced = nebp_time_step_traced(
            &beliefs,
            &slice,
            model,
            &real.config.motion,
            &real.config.measurement,
            root,
            &mut tape,
        )?;
        if let Some(loss) =
            step_loss_node(&mut tape, &traced.estimates, &real.steps[step].truth)
        {
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { realization: realization_id, step });
            }
            loss_total += value;
            let g = tape.backward(loss)?;
            g.accumulate_flat(layout, &mut grads);
        }
        beliefs = traced.out.resampled;
    }
    Ok((loss_total, grads))
}

/// Train a fresh model.
pub fn train(config: &TrainConfig, dataset: &[Realization]) -> Result<TrainOutcome, TrainError> {
    train_from(None, config, dataset, config.epochs)
}

/// Continue training from a checkpoint for `extra_epochs` further passes.
pub fn resume(
    checkpoint: Checkpoint,
    config: &TrainConfig,
    dataset: &[Realization],
    extra_epochs: usize,
) -> Result<TrainOutcome, TrainError> {
    train_from(Some(checkpoint), config, dataset, extra_epochs)
}

fn train_from(
    start: Option<Checkpoint>,
    config: &TrainConfig,
    dataset: &[Realization],
    epochs_to_run: usize,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for real in dataset {
        if real.num_steps() < 2 {
            return Err(TrainError::InvalidConfig(
                "realizations need at least 2 steps to train on".into(),
            ));
        }
    }

    let (mut model, mut adam, start_epoch, train_seed) = match start {
        Some(ckpt) => {
            if ckpt.model.dims != config.dims() {
                return Err(TrainError::InvalidConfig(format!(
                    "checkpoint dims {:?} disagree with config dims {:?}",
                    ckpt.model.dims,
                    config.dims()
                )));
            }
            if ckpt.train_seed != config.seed {
                return Err(TrainError::InvalidConfig(
                    "checkpoint was trained with a different seed".into(),
                ));
            }
            (ckpt.model, ckpt.optimizer, ckpt.epochs_done, ckpt.train_seed)
        }
        None => {
            let model = NebpModel::new(config.dims(), config.seed)?;
            let adam = AdamState::new(
                AdamConfig::with_learning_rate(config.learning_rate),
                model.num_params(),
            );
            (model, adam, 0, config.seed)
        }
    };

    let layout = model.param_layout();
    let num_params = model.num_params();
    let root = StreamRoot(train_seed);
    let mut trace = Vec::new();

    for epoch in start_epoch..start_epoch + epochs_to_run {
        let order = shuffled_indices(dataset.len(), root, epoch);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            if config.per_step_updates {
                let loss = per_step_batch(
                    config, dataset, chunk, epoch, &mut model, &mut adam, &layout, num_params,
                    root,
                )?;
                trace.push(TraceEntry { epoch, batch: batch_idx, loss });
                continue;
            }
            let results: Vec<Result<(f64, Vec<f64>), TrainError>> = chunk
                .par_iter()
                .map(|&r| {
                    rollout_gradients(
                        &dataset[r],
                        r as u64,
                        &model,
                        &layout,
                        num_params,
                        root.child(epoch as u64).child(r as u64),
                    )
                })
                .collect();
            let mut batch_loss = 0.0;
            let mut grads = vec![0.0; num_params];
            for res in results {
                let (loss, g) = res?;
                batch_loss += loss;
                for (d, s) in grads.iter_mut().zip(&g) {
                    *d += s;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            clip_gradients(&mut grads, config.grad_clip);

            let mut params = model.flatten_params();
            adam.apply(&mut params, &grads)?;
            model.set_params(&params);
            trace.push(TraceEntry { epoch, batch: batch_idx, loss: batch_loss * scale });
        }
    }

    let checkpoint = Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model,
        optimizer: adam,
        train_seed,
        epochs_done: start_epoch + epochs_to_run,
    };
    Ok(TrainOutcome { checkpoint, trace })
}

/// Per-step-update mode: batch items run sequentially and every time step
/// applies its own optimizer step.
#[allow(clippy::too_many_arguments)]
fn per_step_batch(
    config: &TrainConfig,
    dataset: &[Realization],
    chunk: &[usize],
    epoch: usize,
    model: &mut NebpModel,
    adam: &mut AdamState,
    layout: &[(ParamId, usize, usize)],
    num_params: usize,
    root: StreamRoot,
) -> Result<f64, TrainError> {
    let mut batch_loss = 0.0;
    for &r in chunk {
        let real = &dataset[r];
        let item_root = root.child(epoch as u64).child(r as u64);
        let mut beliefs = initial_beliefs(real, model.dims.particle_count, item_root)?;
        for step in 1..real.num_steps() {
            let slice = real.slice(step);
            let mut tape = Tape::new();
            let traced = nebp_time_step_traced(
                &beliefs,
                &slice,
                model,
                &real.config.motion,
                &real.config.measurement,
                item_root,
                &mut tape,
            )?;
            if let Some(loss) =
                step_loss_node(&mut tape, &traced.estimates, &real.steps[step].truth)
            {
                let value = tape.scalar_value(loss);
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss { realization: r as u64, step });
                }
                batch_loss += value;
                let g = tape.backward(loss)?;
                let mut grads = vec![0.0; num_params];
                g.accumulate_flat(layout, &mut grads);
                clip_gradients(&mut grads, config.grad_clip);
                let mut params = model.flatten_params();
                adam.apply(&mut params, &grads)?;
                model.set_params(&params);
            }
            beliefs = traced.out.resampled;
        }
    }
    Ok(batch_loss / chunk.len() as f64)
}

fn clip_gradients(grads: &mut [f64], clip: Option<f64>) {
    let Some(limit) = clip else { return };
    let norm: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > limit && norm > 0.0 {
        let scale = limit / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
}

fn shuffled_indices(n: usize, root: StreamRoot, epoch: usize) -> Vec<usize> {
    use rand::Rng;
    let mut rng = root.stream(StreamPurpose::Shuffle, &[epoch as u64]);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Write the loss trace as `epoch,batch,loss` CSV.
pub fn write_loss_trace(path: &Path, trace: &[TraceEntry]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,batch,loss\n");
    for e in trace {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.batch, e.loss));
    }
    crate::fsio::atomic_write(path, out.as_bytes())
        .map_err(|e| TrainError::CheckpointIo(format!("write {}: {e}", path.display())))
}
