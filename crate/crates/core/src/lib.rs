//! Deep state-space generative modeling for correlated discrete
//! time-to-event prediction.
//!
//! The crate learns latent patient-state dynamics from observation and
//! intervention time series with a variational objective, rolls latent
//! states forward to produce per-event hazard trajectories and survival
//! curves, and evaluates predictions with censoring-aware metrics.
//!
//! Module map:
//! - [`diffcore`]: reverse-mode autodiff over dense `f64` tensors.
//! - [`nets`]: MLPs and the bidirectional recurrent encoder cell.
//! - [`ssm`]: generative state-space model and per-event hazard heads.
//! - [`inference`]: variational encoder, KL, censored event likelihood, ELBO.
//! - [`survival`]: hazard-to-distribution algebra and forward roll-out.
//! - [`metrics`]: concordance, windowed AUC/AP, trajectory correlation.
//! - [`data`]: cohort ingestion, preprocessing, and file formats.
//! - [`synthcohort`]: ground-truth simulator for recovery testing.
//! - [`trainer`]: optimization loop, checkpoints, predict, evaluate.

pub mod data;
pub mod diffcore;
pub mod inference;
pub mod metrics;
pub mod nets;
pub mod seeds;
pub mod ssm;
pub mod survival;
pub mod synthcohort;
pub mod trainer;
