//! Particle-based belief propagation for cooperative localization in mobile
//! agent networks, with an optional GNN refinement of the BP messages, plus
//! synthetic scenario generation, training, and consistency evaluation.
//!
//! The crate is organized along the processing pipeline:
//!
//! - [`scenario`]: ground-truth tracks, connectivity, range measurements,
//!   priors, and the on-disk realization format.
//! - [`bp`]: particle beliefs and the prediction / message passing / update
//!   machinery of one BP time step.
//! - [`neural`]: dense MLPs, a reverse-mode gradient tape, and Adam.
//! - [`gnn`]: the message-passing GNN and the refined (neural enhanced) BP
//!   time step, in plain and gradient-taped forms.
//! - [`training`]: dataset iteration, position loss, the optimization loop,
//!   and checkpoints.
//! - [`eval`]: outage probability, NEES, and chi-square consistency curves.
//! - [`rollout`]: runs a realization through either algorithm end to end.

pub mod bp;
pub mod eval;
pub mod fsio;
pub mod gnn;
pub mod linalg;
pub mod neural;
pub mod rng;
pub mod rollout;
pub mod scenario;
pub mod training;
