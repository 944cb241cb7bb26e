//! Training loop, checkpointing, prediction, and evaluation.
//!
//! Gradients are computed per patient on a fresh tape, accumulated in
//! ascending patient order, averaged over the minibatch, and applied with
//! Adam. Every random draw derives from the config seed, so identical
//! (config, cohort, seed) runs produce bit-identical checkpoints.

mod adam;
mod checkpoint;
mod predict;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use predict::{
    evaluate, export_trajectories, predict, prediction_correlations, read_predictions,
    write_metrics_csv, write_predictions, EvaluateOptions, MetricRow, MetricsReport,
    PatientPrediction, Predictions, PredictionsHeader,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Trajectory};
use crate::diffcore::{DiffError, Tape, Tensor};
use crate::inference::{
    elbo, BoundEncoder, ElboValues, ElboWeights, EncoderParams, InferenceError,
};
use crate::seeds;
use crate::ssm::{
    BoundGenerative, CohortSchema, GenerativeParams, NetworkConfig, SsmError,
};
use crate::survival::SurvivalError;

// Seed stream tags.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_SAMPLE: u64 = 3;
const STREAM_EVAL: u64 = 4;
pub(crate) const STREAM_PREDICT: u64 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(
        "non-finite loss: term `{term}` for patient `{patient_id}` at epoch {epoch}"
    )]
    NonFiniteLoss {
        term: String,
        patient_id: String,
        epoch: usize,
    },
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("checkpoint io on {path}: {detail}")]
    CheckpointIo { path: String, detail: String },
    #[error("checkpoint format: {detail}")]
    CheckpointFormat { detail: String },
    #[error("schema mismatch: {detail}")]
    SchemaMismatch { detail: String },
}

/// Training hyperparameters and model dimensions.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub latent_dim: usize,
    pub recurrent_hidden: usize,
    pub mlp_units: usize,
    pub mlp_layers: usize,
    /// Single affine layers for the generative nets and hazard heads.
    pub linear_model: bool,
    /// Reconstruction weight; 0 trains on the literal event-plus-KL bound.
    pub w_rec: f64,
    /// 1 for the full objective, 0 for the regularization-free ablation.
    pub kl_weight: f64,
    /// Global-norm gradient clip; absent by default.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub step_hours: f64,
    pub rollout_horizon: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 20,
            latent_dim: 8,
            recurrent_hidden: 50,
            mlp_units: 32,
            mlp_layers: 3,
            linear_model: false,
            w_rec: 1.0,
            kl_weight: 1.0,
            grad_clip: None,
            seed: 0,
            step_hours: 12.0,
            rollout_horizon: 240,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("step_hours", self.step_hours),
        ];
        for (name, value) in positive {
            if value <= 0.0 || !value.is_finite() {
                return Err(TrainError::BadConfig(format!("{name} must be positive")));
            }
        }
        let nonzero = [
            ("batch_size", self.batch_size),
            ("latent_dim", self.latent_dim),
            ("recurrent_hidden", self.recurrent_hidden),
            ("mlp_units", self.mlp_units),
            ("mlp_layers", self.mlp_layers),
            ("rollout_horizon", self.rollout_horizon),
        ];
        for (name, value) in nonzero {
            if value == 0 {
                return Err(TrainError::BadConfig(format!("{name} must be >= 1")));
            }
        }
        if self.kl_weight != 0.0 && self.kl_weight != 1.0 {
            return Err(TrainError::BadConfig("kl_weight must be 0 or 1".into()));
        }
        if self.w_rec < 0.0 || !self.w_rec.is_finite() {
            return Err(TrainError::BadConfig("w_rec must be >= 0".into()));
        }
        Ok(())
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            mlp_units: self.mlp_units,
            mlp_layers: self.mlp_layers,
            linear: self.linear_model,
        }
    }

    pub fn weights(&self) -> ElboWeights {
        ElboWeights {
            w_rec: self.w_rec,
            kl_weight: self.kl_weight,
        }
    }
}

/// The full trainable model: generative parameters plus the encoder.
#[derive(Clone, Debug)]
pub struct Model {
    pub schema: CohortSchema,
    pub generative: GenerativeParams,
    pub encoder: EncoderParams,
}

impl Model {
    /// Seeded initialization; the parameter layout depends only on
    /// (schema, config).
    pub fn init(schema: CohortSchema, config: &TrainConfig) -> Self {
        use rand::SeedableRng;
        let mut rng =
            rand_chacha::ChaCha20Rng::seed_from_u64(seeds::derive(config.seed, &[STREAM_INIT]));
        let net = config.network();
        let generative = GenerativeParams::init(&schema, &net, &mut rng);
        let encoder = EncoderParams::init(&schema, config.recurrent_hidden, &net, &mut rng);
        Model {
            schema,
            generative,
            encoder,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut names = self.generative.param_names(&self.schema.events);
        names.extend(self.encoder.param_names());
        let mut tensors = self.generative.params();
        tensors.extend(self.encoder.params());
        debug_assert_eq!(names.len(), tensors.len());
        names.into_iter().zip(tensors).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.generative.params_mut();
        out.extend(self.encoder.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            generative: self.generative.bind(tape, &self.schema),
            encoder: self.encoder.bind(tape),
        }
    }
}

/// Tape-bound model; `vars()` aligns with `Model::named_params()`.
pub struct BoundModel<'t> {
    pub generative: BoundGenerative<'t>,
    pub encoder: BoundEncoder<'t>,
}

impl<'t> BoundModel<'t> {
    pub fn vars(&self) -> Vec<crate::diffcore::Var<'t>> {
        let mut out = self.generative.vars();
        out.extend(self.encoder.vars());
        out
    }
}

/// Builds the schema a cohort implies, using dims from the config.
pub fn schema_from_cohort(
    cohort: &[Trajectory],
    config: &TrainConfig,
) -> Result<CohortSchema, TrainError> {
    let (obs_dim, intervention_dim, events) = crate::data::infer_cohort_shape(cohort)?;
    Ok(CohortSchema {
        obs_dim,
        intervention_dim,
        latent_dim: config.latent_dim,
        events,
        step_hours: config.step_hours,
    })
}

/// One row of the loss log.
#[derive(Clone, Debug, Serialize)]
pub struct LossRow {
    pub epoch: usize,
    pub split: String,
    pub total: f64,
    pub event_loglik: f64,
    pub kl: f64,
    pub recon_obs: f64,
    pub recon_u: f64,
}

impl LossRow {
    fn from_values(epoch: usize, split: &str, values: &ElboValues) -> Self {
        LossRow {
            epoch,
            split: split.into(),
            total: values.total,
            event_loglik: values.event_loglik,
            kl: values.kl,
            recon_obs: values.recon_obs,
            recon_u: values.recon_intervention,
        }
    }
}

pub fn write_loss_log(path: &std::path::Path, rows: &[LossRow]) -> Result<(), TrainError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| TrainError::CheckpointIo {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    for row in rows {
        writer.serialize(row).map_err(|e| TrainError::CheckpointIo {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    }
    writer.flush().map_err(|e| TrainError::CheckpointIo {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(())
}

pub struct TrainOutcome {
    pub model: Model,
    pub adam: Adam,
    pub epochs_run: usize,
    pub log: Vec<LossRow>,
}

fn check_finite(
    values: &ElboValues,
    patient_id: &str,
    epoch: usize,
) -> Result<(), TrainError> {
    let terms = [
        ("event_loglik", values.event_loglik),
        ("kl", values.kl),
        ("recon_obs", values.recon_obs),
        ("recon_u", values.recon_intervention),
        ("total", values.total),
    ];
    for (term, value) in terms {
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                term: term.into(),
                patient_id: patient_id.into(),
                epoch,
            });
        }
    }
    Ok(())
}

/// Mean objective terms over a cohort without updating parameters; the
/// sampling seed stream is disjoint from training's.
pub fn evaluate_objective(
    model: &Model,
    cohort: &[Trajectory],
    weights: &ElboWeights,
    seed: u64,
    epoch: usize,
) -> Result<ElboValues, TrainError> {
    let mut acc = ElboValues::default();
    for (idx, trajectory) in cohort.iter().enumerate() {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let sample_seed = seeds::derive(seed, &[STREAM_EVAL, epoch as u64, idx as u64]);
        let terms = elbo(
            &tape,
            &bound.generative,
            &bound.encoder,
            trajectory,
            weights,
            sample_seed,
        )?;
        acc.add_assign(&terms.values());
    }
    Ok(acc.scaled(1.0 / cohort.len().max(1) as f64))
}

/// Runs minibatch gradient training of the negative objective.
///
/// Per epoch, patient order is reshuffled with a seeded generator and split
/// into batches; within a batch, per-patient gradients are accumulated in
/// ascending patient index so the sum is independent of evaluation order.
/// `eval_cohort`, when present, is scored after every epoch with frozen
/// seeds and appended to the loss log.
pub fn train(
    config: &TrainConfig,
    cohort: &[Trajectory],
    eval_cohort: Option<&[Trajectory]>,
) -> Result<TrainOutcome, TrainError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    config.validate()?;
    if cohort.is_empty() {
        return Err(TrainError::EmptyCohort);
    }
    let schema = schema_from_cohort(cohort, config)?;
    let mut model = Model::init(schema, config);
    let shapes: Vec<Vec<usize>> = model
        .named_params()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut optimizer = Adam::new(config.learning_rate, &shapes);
    let weights = config.weights();
    let mut log = Vec::new();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..cohort.len()).collect();
        let mut shuffle_rng = rand_chacha::ChaCha20Rng::seed_from_u64(seeds::derive(
            config.seed,
            &[STREAM_SHUFFLE, epoch as u64],
        ));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_values = ElboValues::default();
        for batch in order.chunks(config.batch_size) {
            let mut members: Vec<usize> = batch.to_vec();
            members.sort_unstable();

            let mut grad_acc: Vec<Tensor> =
                shapes.iter().map(|s| Tensor::zeros(s)).collect();
            for &patient_idx in &members {
                let trajectory = &cohort[patient_idx];
                let tape = Tape::new();
                let bound = model.bind(&tape);
                let sample_seed = seeds::derive(
                    config.seed,
                    &[STREAM_SAMPLE, epoch as u64, patient_idx as u64],
                );
                let terms = elbo(
                    &tape,
                    &bound.generative,
                    &bound.encoder,
                    trajectory,
                    &weights,
                    sample_seed,
                )?;
                let values = terms.values();
                check_finite(&values, &trajectory.patient_id, epoch)?;
                epoch_values.add_assign(&values);

                let grads = tape.backward(terms.total)?;
                for (acc, var) in grad_acc.iter_mut().zip(bound.vars()) {
                    if let Some(g) = grads.wrt_opt(var) {
                        for (a, gv) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += gv;
                        }
                    }
                }
            }

            // Mean over patients, negated: gradient of the loss.
            let scale = -1.0 / members.len() as f64;
            for g in &mut grad_acc {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            if let Some(max_norm) = config.grad_clip {
                clip_global_norm(&mut grad_acc, max_norm);
            }
            optimizer.update(&mut model.params_mut(), &grad_acc);
        }

        log.push(LossRow::from_values(
            epoch,
            "train",
            &epoch_values.scaled(1.0 / cohort.len() as f64),
        ));
        if let Some(eval) = eval_cohort {
            if !eval.is_empty() {
                let values = evaluate_objective(&model, eval, &weights, config.seed, epoch)?;
                log.push(LossRow::from_values(epoch, "eval", &values));
            }
        }
    }

    Ok(TrainOutcome {
        model,
        adam: optimizer,
        epochs_run: config.epochs,
        log,
    })
}
