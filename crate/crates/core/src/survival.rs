//! Hazard-to-distribution algebra and forward roll-out.
//!
//! Discrete-time identities: `S(t) = S(t-1) * (1 - h_t)` with `S(0) = 1`, and
//! `f(t) = S(t-1) * h_t`. Survival is accumulated in log space so horizons of
//! thousands of steps do not underflow intermediate products.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::diffcore::{Tape, Var};
use crate::inference::sample_gaussian;
use crate::ssm::{BoundGenerative, SsmError};

#[derive(Debug, Error)]
pub enum SurvivalError {
    #[error("hazard sequence is empty")]
    EmptyHazards,
    #[error("hazard {value} at step {step} outside [0, 1]")]
    HazardOutOfRange { step: usize, value: f64 },
    #[error("window {window} outside [1, {horizon}]")]
    WindowOutOfRange { window: usize, horizon: usize },
    #[error("roll-out horizon must be >= 1")]
    EmptyHorizon,
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
}

/// Per-event hazard values over a roll-out horizon, relative to the
/// prediction step: `hazards[tau - 1]` is the hazard at `t* + tau`.
#[derive(Clone, Debug)]
pub struct HazardTrajectory {
    pub event: String,
    /// Prediction-time step index `t*` on the patient's absolute grid.
    pub prediction_step: usize,
    pub hazards: Vec<f64>,
}

impl HazardTrajectory {
    pub fn horizon(&self) -> usize {
        self.hazards.len()
    }

    /// Hazard at offset `tau >= 1`, extending past the horizon with the
    /// last step's value.
    pub fn hazard_at(&self, tau: usize) -> f64 {
        extend_constant_tail(self, tau)
    }
}

/// Hazard beyond the horizon is held constant at the final step's value;
/// `tau = horizon` returns that value itself.
pub fn extend_constant_tail(trajectory: &HazardTrajectory, tau: usize) -> f64 {
    debug_assert!(tau >= 1);
    let idx = tau.min(trajectory.hazards.len());
    trajectory.hazards[idx - 1]
}

/// Survival and incidence values over a horizon.
///
/// `survival[t]` is `S(t)` for `t = 0..=H` (`S(0) = 1`);
/// `density[t - 1]` is `f(t)` for `t = 1..=H`.
#[derive(Clone, Debug)]
pub struct SurvivalCurve {
    pub survival: Vec<f64>,
    pub density: Vec<f64>,
}

impl SurvivalCurve {
    pub fn horizon(&self) -> usize {
        self.density.len()
    }

    pub fn survival_at(&self, t: usize) -> f64 {
        self.survival[t]
    }
}

/// Builds the survival curve for a hazard sequence. Hazards must lie in
/// `[0, 1]`; log-space accumulation keeps long products stable.
pub fn survival_from_hazard(hazards: &[f64]) -> Result<SurvivalCurve, SurvivalError> {
    if hazards.is_empty() {
        return Err(SurvivalError::EmptyHazards);
    }
    let mut survival = Vec::with_capacity(hazards.len() + 1);
    let mut density = Vec::with_capacity(hazards.len());
    survival.push(1.0);
    let mut log_survival = 0.0f64;
    for (step, &h) in hazards.iter().enumerate() {
        if !(0.0..=1.0).contains(&h) || !h.is_finite() {
            return Err(SurvivalError::HazardOutOfRange {
                step: step + 1,
                value: h,
            });
        }
        let prev = *survival.last().unwrap();
        density.push(prev * h);
        log_survival += (-h).ln_1p();
        survival.push(log_survival.exp());
    }
    Ok(SurvivalCurve { survival, density })
}

/// Survival extended `steps_beyond` past the curve's horizon under a
/// constant tail hazard: `S(H) * (1 - tail_hazard)^k`.
pub fn extended_survival(curve: &SurvivalCurve, tail_hazard: f64, steps_beyond: usize) -> f64 {
    curve.survival[curve.horizon()] * (1.0 - tail_hazard).powi(steps_beyond as i32)
}

/// Predicted probability of the event within `window` steps: `1 - S(window)`.
pub fn risk_score(curve: &SurvivalCurve, window: usize) -> Result<f64, SurvivalError> {
    if window == 0 || window > curve.horizon() {
        return Err(SurvivalError::WindowOutOfRange {
            window,
            horizon: curve.horizon(),
        });
    }
    Ok(1.0 - curve.survival[window])
}

/// How latent states and interventions advance during roll-out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Propagate means; fully deterministic.
    Mean,
    /// Draw seeded samples at every step, for uncertainty bands.
    Sampled,
}

/// Hazard values for every event over a roll-out: `hazards[event][patient]`
/// is a length-`horizon` sequence.
pub struct RolloutResult {
    pub events: Vec<String>,
    pub hazards: Vec<Vec<Vec<f64>>>,
}

/// Rolls the generative model forward from `z_star` (`[batch, latent]`) for
/// `horizon` steps: forecast the next intervention from the current state,
/// advance the state through the transition, and read every event's hazard
/// head at the new state.
pub fn rollout<'t>(
    tape: &'t Tape,
    generative: &BoundGenerative<'t>,
    z_star: Var<'t>,
    horizon: usize,
    mode: RolloutMode,
    seed: u64,
) -> Result<RolloutResult, SurvivalError> {
    if horizon == 0 {
        return Err(SurvivalError::EmptyHorizon);
    }
    let batch = z_star.shape()[0];
    let n_events = generative.events().len();
    let mut hazards = vec![vec![Vec::with_capacity(horizon); batch]; n_events];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut state = z_star;
    for _ in 0..horizon {
        let forecast = generative.forecast_intervention(state)?;
        let intervention = match mode {
            RolloutMode::Mean => forecast.mean,
            RolloutMode::Sampled => sample_gaussian(tape, &forecast, &mut rng)?,
        };
        let prior = generative.transition_prior(state, intervention)?;
        state = match mode {
            RolloutMode::Mean => prior.mean,
            RolloutMode::Sampled => sample_gaussian(tape, &prior, &mut rng)?,
        };
        for (event_idx, per_event) in hazards.iter_mut().enumerate() {
            let lambda = generative.hazard_by_index(state, event_idx)?.value();
            for (patient, seq) in per_event.iter_mut().enumerate() {
                seq.push(lambda.data()[patient]);
            }
        }
    }
    Ok(RolloutResult {
        events: generative.events().to_vec(),
        hazards,
    })
}
