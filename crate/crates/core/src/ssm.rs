//! Generative state-space model: latent transition with intervention effect,
//! observation emission, intervention forecast, and per-event hazard heads.
//!
//! All events share the latent state; each event has its own hazard head, so
//! perturbing one head never changes another event's hazard.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::nets::{Activation, BoundMlp, MlpParams, NetError, OutputActivation};

/// Hazards are squashed into `[HAZARD_FLOOR, 1 - HAZARD_FLOOR]` so that both
/// `log(hazard)` and `log(1 - hazard)` stay finite.
pub const HAZARD_FLOOR: f64 = 1e-7;

/// Variance floor added after softplus when parameterizing posteriors.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SsmError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("unknown event name `{name}`; catalog is {catalog:?}")]
    UnknownEvent { name: String, catalog: Vec<String> },
}

/// Dimensions and event catalog shared by model, data, and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSchema {
    pub obs_dim: usize,
    pub intervention_dim: usize,
    pub latent_dim: usize,
    /// Ordered event catalog; hazard heads align with this order.
    pub events: Vec<String>,
    /// Hours covered by one discrete step.
    pub step_hours: f64,
}

impl CohortSchema {
    pub fn event_index(&self, name: &str) -> Result<usize, SsmError> {
        self.events
            .iter()
            .position(|e| e == name)
            .ok_or_else(|| SsmError::UnknownEvent {
                name: name.to_string(),
                catalog: self.events.clone(),
            })
    }
}

/// Network shape knobs for the generative nets and encoder combiner.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Hidden units per MLP layer.
    pub mlp_units: usize,
    /// Number of affine layers per MLP.
    pub mlp_layers: usize,
    /// When set, transition/effect/emission/forecast nets and hazard heads
    /// collapse to single affine layers (a linear state-space model with
    /// logistic hazards).
    pub linear: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            mlp_units: 32,
            mlp_layers: 3,
            linear: false,
        }
    }
}

impl NetworkConfig {
    fn dims(&self, input: usize, output: usize) -> Vec<usize> {
        if self.linear || self.mlp_layers <= 1 {
            vec![input, output]
        } else {
            let mut dims = vec![input];
            dims.extend(std::iter::repeat(self.mlp_units).take(self.mlp_layers - 1));
            dims.push(output);
            dims
        }
    }
}

/// A diagonal Gaussian recorded on a tape: `mean` and per-dimension
/// `variance`, both `[batch, dim]`. Variance is strictly positive by
/// construction (exp or softplus-with-floor parameterizations).
#[derive(Clone, Copy)]
pub struct GaussianDiag<'t> {
    pub mean: Var<'t>,
    pub variance: Var<'t>,
}

/// Parameters of the generative model: transition and intervention-effect
/// nets, observation emission, intervention forecast, one hazard head per
/// event, and log-variance vectors for the process, observation, and
/// intervention noise (time-invariant diagonals).
#[derive(Clone, Debug)]
pub struct GenerativeParams {
    pub transition: MlpParams,
    pub intervention_effect: MlpParams,
    pub emission: MlpParams,
    pub intervention_forecast: MlpParams,
    /// Aligned with `CohortSchema::events`.
    pub hazard_heads: Vec<MlpParams>,
    pub log_var_process: Tensor,
    pub log_var_obs: Tensor,
    pub log_var_intervention: Tensor,
}

impl GenerativeParams {
    pub fn init<R: Rng>(schema: &CohortSchema, net: &NetworkConfig, rng: &mut R) -> Self {
        let latent = schema.latent_dim;
        let mlp = |dims: &[usize], out: OutputActivation, rng: &mut R| {
            MlpParams::new(dims, Activation::Tanh, out, rng)
        };
        let transition = mlp(&net.dims(latent, latent), OutputActivation::Identity, rng);
        let intervention_effect = mlp(
            &net.dims(schema.intervention_dim, latent),
            OutputActivation::Identity,
            rng,
        );
        let emission = mlp(&net.dims(latent, schema.obs_dim), OutputActivation::Identity, rng);
        let intervention_forecast = mlp(
            &net.dims(latent, schema.intervention_dim),
            OutputActivation::Identity,
            rng,
        );
        let hazard_heads = schema
            .events
            .iter()
            .map(|_| mlp(&net.dims(latent, 1), OutputActivation::Sigmoid, rng))
            .collect();
        GenerativeParams {
            transition,
            intervention_effect,
            emission,
            intervention_forecast,
            hazard_heads,
            log_var_process: Tensor::zeros(&[1, latent]),
            log_var_obs: Tensor::zeros(&[1, schema.obs_dim]),
            log_var_intervention: Tensor::zeros(&[1, schema.intervention_dim]),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.transition.params();
        out.extend(self.intervention_effect.params());
        out.extend(self.emission.params());
        out.extend(self.intervention_forecast.params());
        for head in &self.hazard_heads {
            out.extend(head.params());
        }
        out.push(&self.log_var_process);
        out.push(&self.log_var_obs);
        out.push(&self.log_var_intervention);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.transition.params_mut();
        out.extend(self.intervention_effect.params_mut());
        out.extend(self.emission.params_mut());
        out.extend(self.intervention_forecast.params_mut());
        for head in &mut self.hazard_heads {
            out.extend(head.params_mut());
        }
        out.push(&mut self.log_var_process);
        out.push(&mut self.log_var_obs);
        out.push(&mut self.log_var_intervention);
        out
    }

    pub fn param_names(&self, events: &[String]) -> Vec<String> {
        let mut out = self.transition.param_names("gen.transition");
        out.extend(self.intervention_effect.param_names("gen.intervention_effect"));
        out.extend(self.emission.param_names("gen.emission"));
        out.extend(self.intervention_forecast.param_names("gen.intervention_forecast"));
        for (head, event) in self.hazard_heads.iter().zip(events) {
            out.extend(head.param_names(&format!("gen.hazard.{event}")));
        }
        out.push("gen.log_var_process".into());
        out.push("gen.log_var_obs".into());
        out.push("gen.log_var_intervention".into());
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape, schema: &CohortSchema) -> BoundGenerative<'t> {
        BoundGenerative {
            tape,
            events: schema.events.clone(),
            transition: self.transition.bind(tape),
            intervention_effect: self.intervention_effect.bind(tape),
            emission: self.emission.bind(tape),
            intervention_forecast: self.intervention_forecast.bind(tape),
            hazard_heads: self.hazard_heads.iter().map(|h| h.bind(tape)).collect(),
            log_var_process: tape.trainable(self.log_var_process.clone()),
            log_var_obs: tape.trainable(self.log_var_obs.clone()),
            log_var_intervention: tape.trainable(self.log_var_intervention.clone()),
        }
    }
}

/// Generative parameters bound to a tape.
pub struct BoundGenerative<'t> {
    tape: &'t Tape,
    events: Vec<String>,
    pub transition: BoundMlp<'t>,
    pub intervention_effect: BoundMlp<'t>,
    pub emission: BoundMlp<'t>,
    pub intervention_forecast: BoundMlp<'t>,
    pub hazard_heads: Vec<BoundMlp<'t>>,
    pub log_var_process: Var<'t>,
    pub log_var_obs: Var<'t>,
    pub log_var_intervention: Var<'t>,
}

impl<'t> BoundGenerative<'t> {
    /// Tape vars in `GenerativeParams::params()` order.
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = self.transition.vars();
        out.extend(self.intervention_effect.vars());
        out.extend(self.emission.vars());
        out.extend(self.intervention_forecast.vars());
        for head in &self.hazard_heads {
            out.extend(head.vars());
        }
        out.push(self.log_var_process);
        out.push(self.log_var_obs);
        out.push(self.log_var_intervention);
        out
    }

    pub fn events(&self) -> &[String] {
        &self.events
    }

    /// Broadcasts `exp(log_var)` (`[1, dim]`) over a batch.
    fn variance_rows(&self, log_var: Var<'t>, batch: usize) -> Result<Var<'t>, DiffError> {
        self.tape.ones_column(batch).matmul(log_var.exp()?)
    }

    /// Latent transition prior: mean `A(z_prev) + B(u)`, process-noise
    /// variance broadcast over the batch.
    pub fn transition_prior(
        &self,
        z_prev: Var<'t>,
        intervention: Var<'t>,
    ) -> Result<GaussianDiag<'t>, SsmError> {
        let drift = self.transition.forward(z_prev)?;
        let effect = self.intervention_effect.forward(intervention)?;
        Ok(GaussianDiag {
            mean: drift.add(effect)?,
            variance: self.variance_rows(self.log_var_process, z_prev.shape()[0])?,
        })
    }

    /// Observation emission: mean `C(z)`, measurement-noise variance.
    pub fn emit_observation(&self, z: Var<'t>) -> Result<GaussianDiag<'t>, SsmError> {
        Ok(GaussianDiag {
            mean: self.emission.forward(z)?,
            variance: self.variance_rows(self.log_var_obs, z.shape()[0])?,
        })
    }

    /// Next-step intervention forecast: mean `D(z_prev)`. A schema with no
    /// intervention channels yields a `[batch, 0]` Gaussian.
    pub fn forecast_intervention(&self, z_prev: Var<'t>) -> Result<GaussianDiag<'t>, SsmError> {
        Ok(GaussianDiag {
            mean: self.intervention_forecast.forward(z_prev)?,
            variance: self.variance_rows(self.log_var_intervention, z_prev.shape()[0])?,
        })
    }

    /// Discrete-time hazard for one event at state `z`: sigmoid head output,
    /// affinely squashed into `[HAZARD_FLOOR, 1 - HAZARD_FLOOR]`.
    pub fn hazard(&self, z: Var<'t>, event: &str) -> Result<Var<'t>, SsmError> {
        let idx = self
            .events
            .iter()
            .position(|e| e == event)
            .ok_or_else(|| SsmError::UnknownEvent {
                name: event.to_string(),
                catalog: self.events.clone(),
            })?;
        self.hazard_by_index(z, idx)
    }

    /// Hazard for the event at `CohortSchema::events[idx]`.
    pub fn hazard_by_index(&self, z: Var<'t>, idx: usize) -> Result<Var<'t>, SsmError> {
        let raw = self.hazard_heads[idx].forward(z)?;
        let floor = self.tape.scalar(HAZARD_FLOOR);
        Ok(raw.scale(1.0 - 2.0 * HAZARD_FLOOR)?.add(floor)?)
    }
}
