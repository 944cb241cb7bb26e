//! Variational inference: the recurrent encoder, analytic diagonal-Gaussian
//! KL, the censored event log-likelihood, and the assembled ELBO.
//!
//! The objective for one patient is
//! `sum_e event_loglik_e - kl_weight * kl + w_rec * (recon_obs + recon_u)`;
//! the trainer averages it over patients. Terms excluded by a zero weight are
//! still evaluated for logging but never enter the backward pass, so the
//! parameters they alone touch receive exactly zero gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::data::{EventRecord, Trajectory};
use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::nets::{birnn_encode, BoundCell, BoundMlp, MlpParams, NetError, RecurrentCellParams};
use crate::ssm::{
    BoundGenerative, CohortSchema, GaussianDiag, NetworkConfig, SsmError, VARIANCE_FLOOR,
};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("event time {t} outside [1, {t_max}]")]
    EventTimeOutOfRange { t: usize, t_max: usize },
    #[error("no event record for catalog event `{event}`")]
    MissingEventRecord { event: String },
}

/// Encoder parameters: a bidirectional recurrent pass over `concat(x_t, u_t)`
/// and a combiner MLP from `concat(z_prev_sample, rnn_out_t)` to the
/// posterior mean and pre-softplus variance of `z_t`.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub fwd: RecurrentCellParams,
    pub bwd: RecurrentCellParams,
    pub combiner: MlpParams,
}

impl EncoderParams {
    pub fn init(
        schema: &CohortSchema,
        recurrent_hidden: usize,
        net: &NetworkConfig,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let input_dim = schema.obs_dim + schema.intervention_dim;
        let fwd = RecurrentCellParams::new(input_dim, recurrent_hidden, rng);
        let bwd = RecurrentCellParams::new(input_dim, recurrent_hidden, rng);
        let combiner_in = schema.latent_dim + 2 * recurrent_hidden;
        let mut dims = vec![combiner_in];
        if !net.linear && net.mlp_layers > 1 {
            dims.extend(std::iter::repeat(net.mlp_units).take(net.mlp_layers - 1));
        }
        dims.push(2 * schema.latent_dim);
        let combiner = MlpParams::new(
            &dims,
            crate::nets::Activation::Tanh,
            crate::nets::OutputActivation::Identity,
            rng,
        );
        EncoderParams { fwd, bwd, combiner }
    }

    pub fn latent_dim(&self) -> usize {
        self.combiner.output_dim() / 2
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.fwd.params();
        out.extend(self.bwd.params());
        out.extend(self.combiner.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.fwd.params_mut();
        out.extend(self.bwd.params_mut());
        out.extend(self.combiner.params_mut());
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = self.fwd.param_names("enc.fwd");
        out.extend(self.bwd.param_names("enc.bwd"));
        out.extend(self.combiner.param_names("enc.combiner"));
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t> {
        BoundEncoder {
            latent_dim: self.latent_dim(),
            fwd: self.fwd.bind(tape),
            bwd: self.bwd.bind(tape),
            combiner: self.combiner.bind(tape),
        }
    }
}

pub struct BoundEncoder<'t> {
    latent_dim: usize,
    pub fwd: BoundCell<'t>,
    pub bwd: BoundCell<'t>,
    pub combiner: BoundMlp<'t>,
}

impl<'t> BoundEncoder<'t> {
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = self.fwd.vars();
        out.extend(self.bwd.vars());
        out.extend(self.combiner.vars());
        out
    }
}

/// Posterior at one step: the variational Gaussian and a reparameterized
/// sample from it.
pub struct PosteriorStep<'t> {
    pub q: GaussianDiag<'t>,
    pub sample: Var<'t>,
}

/// Per-step posteriors for `t = 1..=T`.
pub struct PosteriorSequence<'t> {
    pub steps: Vec<PosteriorStep<'t>>,
}

/// Reparameterized draw `mean + sqrt(var) * eps` with `eps ~ N(0, I)` from
/// the given generator. Gradients flow through mean and variance only.
pub fn sample_gaussian<'t>(
    tape: &'t Tape,
    g: &GaussianDiag<'t>,
    rng: &mut ChaCha20Rng,
) -> Result<Var<'t>, DiffError> {
    let shape = g.mean.shape();
    let n: usize = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let eps = tape.constant(Tensor::new(shape, eps)?);
    // sqrt(var) = exp(0.5 * log var); var is strictly positive by construction.
    let std = g.variance.log()?.scale(0.5)?.exp()?;
    g.mean.add(std.mul(eps)?)
}

/// Tape leaves for one trajectory's inputs plus its encoded posterior.
pub struct EncodedTrajectory<'t> {
    pub x_steps: Vec<Var<'t>>,
    pub u_steps: Vec<Var<'t>>,
    pub posterior: PosteriorSequence<'t>,
}

/// Runs the encoder over a trajectory.
///
/// Per step `t`: the bidirectional pass consumes `concat(x_t, u_t)`; the
/// combiner maps `concat(z_{t-1} sample, rnn_out_t)` (zero vector at `t = 1`)
/// to the posterior mean and pre-softplus variance; the variance is
/// `softplus(raw) + VARIANCE_FLOOR`; the sample is reparameterized with
/// noise from `ChaCha20Rng::seed_from_u64(seed)`, drawn one step at a time
/// in step order.
pub fn encode_with_inputs<'t>(
    tape: &'t Tape,
    encoder: &BoundEncoder<'t>,
    trajectory: &Trajectory,
    seed: u64,
) -> Result<EncodedTrajectory<'t>, InferenceError> {
    if trajectory.t_max == 0 {
        return Err(InferenceError::EmptyTrajectory);
    }
    let latent = encoder.latent_dim;
    let x_steps: Vec<Var<'t>> = trajectory
        .x
        .iter()
        .map(|row| tape.constant(Tensor::row(row.clone())))
        .collect();
    let u_steps: Vec<Var<'t>> = trajectory
        .u
        .iter()
        .map(|row| tape.constant(Tensor::row(row.clone())))
        .collect();
    let inputs: Vec<Var<'t>> = x_steps
        .iter()
        .zip(&u_steps)
        .map(|(&x, &u)| x.concat(u))
        .collect::<Result<_, _>>()?;

    let hidden = birnn_encode(&encoder.fwd, &encoder.bwd, &inputs)?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let floor = tape.scalar(VARIANCE_FLOOR);
    let mut prev_sample = tape.constant(Tensor::zeros(&[1, latent]));
    let mut steps = Vec::with_capacity(trajectory.t_max);
    for h in hidden {
        let combined = encoder.combiner.forward(prev_sample.concat(h)?)?;
        let mean = combined.slice(0, latent)?;
        let raw_var = combined.slice(latent, latent)?;
        let variance = raw_var.softplus()?.add(floor)?;
        let q = GaussianDiag { mean, variance };
        let sample = sample_gaussian(tape, &q, &mut rng)?;
        steps.push(PosteriorStep { q, sample });
        prev_sample = sample;
    }

    Ok(EncodedTrajectory {
        x_steps,
        u_steps,
        posterior: PosteriorSequence { steps },
    })
}

/// Encoder entry point when only the posterior is needed.
pub fn encode<'t>(
    tape: &'t Tape,
    encoder: &BoundEncoder<'t>,
    trajectory: &Trajectory,
    seed: u64,
) -> Result<PosteriorSequence<'t>, InferenceError> {
    Ok(encode_with_inputs(tape, encoder, trajectory, seed)?.posterior)
}

/// Analytic KL divergence between diagonal Gaussians, summed over dimensions
/// and averaged over the batch:
/// `0.5 * sum(log vp - log vq + (vq + (mq - mp)^2) / vp - 1)`.
pub fn kl_gaussian_diag<'t>(
    q: &GaussianDiag<'t>,
    p: &GaussianDiag<'t>,
) -> Result<Var<'t>, DiffError> {
    let tape = q.mean.tape();
    let batch = q.mean.shape()[0].max(1) as f64;
    let log_vq = q.variance.log()?;
    let log_vp = p.variance.log()?;
    let inv_vp = log_vp.scale(-1.0)?.exp()?;
    let diff_sq = q.mean.sub(p.mean)?.square()?;
    let ratio = q.variance.add(diff_sq)?.mul(inv_vp)?;
    let one = tape.scalar(1.0);
    log_vp
        .sub(log_vq)?
        .add(ratio)?
        .sub(one)?
        .sum()?
        .scale(0.5 / batch)
}

/// Censored event log-likelihood from per-step hazards (Bernoulli
/// factorization of the discrete survival process):
/// observed at `t`: `sum_{s<t} log(1 - h_s) + log h_t`;
/// censored at `t`: `sum_{s<=t} log(1 - h_s)`.
///
/// Hazards at steps after `t` are never touched, so the censored branch is
/// bit-invariant to them.
pub fn event_loglik<'t>(
    hazards: &[Var<'t>],
    record: &EventRecord,
) -> Result<Var<'t>, InferenceError> {
    if record.t == 0 || record.t > hazards.len() {
        return Err(InferenceError::EventTimeOutOfRange {
            t: record.t,
            t_max: hazards.len(),
        });
    }
    let tape = hazards[0].tape();
    let one = tape.scalar(1.0);
    let mut total = tape.scalar(0.0);
    let survive_until = if record.is_censored() {
        record.t
    } else {
        record.t - 1
    };
    for &hazard in &hazards[..survive_until] {
        total = total.add(one.sub(hazard)?.log()?.sum()?)?;
    }
    if !record.is_censored() {
        total = total.add(hazards[record.t - 1].log()?.sum()?)?;
    }
    Ok(total)
}

/// Gaussian log-density of `x` under a diagonal Gaussian, summed over
/// dimensions and batch.
fn gaussian_loglik<'t>(x: Var<'t>, g: &GaussianDiag<'t>) -> Result<Var<'t>, DiffError> {
    if x.shape().iter().product::<usize>() == 0 {
        return Ok(x.tape().scalar(0.0));
    }
    let log_v = g.variance.log()?;
    let inv_v = log_v.scale(-1.0)?.exp()?;
    let sq = x.sub(g.mean)?.square()?.mul(inv_v)?;
    let ln2pi = x.tape().scalar(LN_2PI);
    log_v.add(sq)?.add(ln2pi)?.sum()?.scale(-0.5)
}

/// Term weights for the objective.
#[derive(Clone, Copy, Debug)]
pub struct ElboWeights {
    /// Reconstruction weight; 0 reproduces the literal event-plus-KL bound.
    pub w_rec: f64,
    /// KL weight in {0, 1}; 0 is the regularization-free ablation.
    pub kl_weight: f64,
}

impl Default for ElboWeights {
    fn default() -> Self {
        ElboWeights {
            w_rec: 1.0,
            kl_weight: 1.0,
        }
    }
}

/// The per-patient objective, split into its terms. All values are tape
/// scalars; `total` is the node to differentiate.
pub struct ElboTerms<'t> {
    /// Per-event log-likelihood terms, in catalog order.
    pub event_loglik: Vec<(String, Var<'t>)>,
    pub kl: Var<'t>,
    pub recon_obs: Var<'t>,
    pub recon_intervention: Var<'t>,
    pub total: Var<'t>,
}

impl ElboTerms<'_> {
    pub fn event_loglik_sum(&self) -> f64 {
        self.event_loglik
            .iter()
            .map(|(_, v)| v.scalar_value().unwrap_or(f64::NAN))
            .sum()
    }

    pub fn values(&self) -> ElboValues {
        ElboValues {
            event_loglik: self.event_loglik_sum(),
            kl: self.kl.scalar_value().unwrap_or(f64::NAN),
            recon_obs: self.recon_obs.scalar_value().unwrap_or(f64::NAN),
            recon_intervention: self.recon_intervention.scalar_value().unwrap_or(f64::NAN),
            total: self.total.scalar_value().unwrap_or(f64::NAN),
        }
    }
}

/// Plain-number snapshot of the objective terms, for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct ElboValues {
    pub event_loglik: f64,
    pub kl: f64,
    pub recon_obs: f64,
    pub recon_intervention: f64,
    pub total: f64,
}

impl ElboValues {
    pub fn add_assign(&mut self, other: &ElboValues) {
        self.event_loglik += other.event_loglik;
        self.kl += other.kl;
        self.recon_obs += other.recon_obs;
        self.recon_intervention += other.recon_intervention;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> ElboValues {
        ElboValues {
            event_loglik: self.event_loglik * s,
            kl: self.kl * s,
            recon_obs: self.recon_obs * s,
            recon_intervention: self.recon_intervention * s,
            total: self.total * s,
        }
    }
}

/// Assembles the full objective for one patient.
///
/// Encoding, per-step hazards for every catalog event, the per-step KL
/// against the transition prior (with `z_0 = 0`), and optional Gaussian
/// reconstruction terms for observations (via the emission net) and
/// interventions (via the forecast net, evaluated at the previous sample).
pub fn elbo<'t>(
    tape: &'t Tape,
    generative: &BoundGenerative<'t>,
    encoder: &BoundEncoder<'t>,
    trajectory: &Trajectory,
    weights: &ElboWeights,
    seed: u64,
) -> Result<ElboTerms<'t>, InferenceError> {
    let encoded = encode_with_inputs(tape, encoder, trajectory, seed)?;
    let steps = &encoded.posterior.steps;
    let latent = steps[0].q.mean.shape()[1];
    let zero_state = tape.constant(Tensor::zeros(&[1, latent]));

    let mut kl = tape.scalar(0.0);
    let mut recon_obs = tape.scalar(0.0);
    let mut recon_intervention = tape.scalar(0.0);
    let mut prev_sample = zero_state;
    for (t, step) in steps.iter().enumerate() {
        let prior = generative.transition_prior(prev_sample, encoded.u_steps[t])?;
        kl = kl.add(kl_gaussian_diag(&step.q, &prior)?)?;
        let emitted = generative.emit_observation(step.sample)?;
        recon_obs = recon_obs.add(gaussian_loglik(encoded.x_steps[t], &emitted)?)?;
        let forecast = generative.forecast_intervention(prev_sample)?;
        recon_intervention =
            recon_intervention.add(gaussian_loglik(encoded.u_steps[t], &forecast)?)?;
        prev_sample = step.sample;
    }

    let mut event_terms = Vec::with_capacity(generative.events().len());
    let mut event_sum = tape.scalar(0.0);
    for (idx, event) in generative.events().iter().enumerate() {
        let record = trajectory
            .events
            .get(event)
            .ok_or_else(|| InferenceError::MissingEventRecord {
                event: event.clone(),
            })?;
        let hazards: Vec<Var<'t>> = steps
            .iter()
            .map(|s| generative.hazard_by_index(s.sample, idx))
            .collect::<Result<_, _>>()?;
        let loglik = event_loglik(&hazards, record)?;
        event_sum = event_sum.add(loglik)?;
        event_terms.push((event.clone(), loglik));
    }

    let mut total = event_sum;
    if weights.kl_weight != 0.0 {
        total = total.sub(kl.scale(weights.kl_weight)?)?;
    }
    if weights.w_rec != 0.0 {
        total = total.add(recon_obs.add(recon_intervention)?.scale(weights.w_rec)?)?;
    }

    Ok(ElboTerms {
        event_loglik: event_terms,
        kl,
        recon_obs,
        recon_intervention,
        total,
    })
}
