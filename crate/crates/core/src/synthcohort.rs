//! Ground-truth cohort simulator: linear-Gaussian latent dynamics with
//! logistic hazards, plus an oracle file of the true per-step hazards.
//!
//! The generating process is exactly representable by the linear-mode model
//! with sigmoid hazard heads, so training on a simulated cohort is an
//! identifiability check rather than an approximation check.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::data::{self, DataError, EventRecord, EventRow, Trajectory};
use crate::ssm::CohortSchema;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("ground truth is inconsistent: {0}")]
    BadGroundTruth(String),
}

/// One event's logistic hazard: `sigmoid(weights . z + bias)`.
#[derive(Clone, Debug)]
pub struct SynthEvent {
    pub name: String,
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Known generating parameters. Matrices are row-major with states as rows:
/// `z_next = z . transition + u . intervention_effect`,
/// `x = z . emission`, `u_next = z . policy`.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub intervention_dim: usize,
    /// `[latent, latent]`; spectral radius must stay at or below 1 for
    /// stable dynamics.
    pub transition: Vec<f64>,
    /// `[intervention, latent]`
    pub intervention_effect: Vec<f64>,
    /// `[latent, obs]`
    pub emission: Vec<f64>,
    /// `[latent, intervention]`
    pub policy: Vec<f64>,
    pub events: Vec<SynthEvent>,
    pub sigma_process: f64,
    pub sigma_obs: f64,
    pub sigma_intervention: f64,
    pub t_max: usize,
    /// Probability of censoring a patient at a uniform random step before
    /// the administrative horizon.
    pub early_censor_prob: f64,
    pub step_hours: f64,
}

impl GroundTruth {
    /// Cohort of three events over a two-dimensional state: the second and
    /// third events share hazard weights, giving identical true hazard
    /// trajectories per patient.
    pub fn demo(t_max: usize) -> Self {
        GroundTruth {
            latent_dim: 2,
            obs_dim: 6,
            intervention_dim: 2,
            // Damped rotation, spectral radius ~0.93.
            transition: vec![0.92, 0.10, -0.10, 0.92],
            intervention_effect: vec![0.08, 0.0, 0.0, 0.08],
            emission: vec![
                1.0, -0.5, 0.3, 0.9, -0.2, 0.6, //
                0.2, 0.8, -0.7, 0.4, -0.9, 0.1,
            ],
            policy: vec![0.35, -0.15, 0.10, 0.30],
            events: vec![
                SynthEvent {
                    name: "event_a".into(),
                    weights: vec![1.8, -0.9],
                    bias: -3.6,
                },
                SynthEvent {
                    name: "event_b".into(),
                    weights: vec![-0.7, 1.5],
                    bias: -3.8,
                },
                SynthEvent {
                    name: "event_c".into(),
                    weights: vec![-0.7, 1.5],
                    bias: -3.8,
                },
            ],
            sigma_process: 0.06,
            sigma_obs: 0.25,
            sigma_intervention: 0.05,
            t_max,
            early_censor_prob: 0.3,
            step_hours: 12.0,
        }
    }

    pub fn schema(&self, latent_dim: usize) -> CohortSchema {
        CohortSchema {
            obs_dim: self.obs_dim,
            intervention_dim: self.intervention_dim,
            latent_dim,
            events: self.events.iter().map(|e| e.name.clone()).collect(),
            step_hours: self.step_hours,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let checks = [
            (self.transition.len(), self.latent_dim * self.latent_dim, "transition"),
            (
                self.intervention_effect.len(),
                self.intervention_dim * self.latent_dim,
                "intervention_effect",
            ),
            (self.emission.len(), self.latent_dim * self.obs_dim, "emission"),
            (self.policy.len(), self.latent_dim * self.intervention_dim, "policy"),
        ];
        for (got, want, name) in checks {
            if got != want {
                return Err(SimError::BadGroundTruth(format!(
                    "{name} has {got} entries, expected {want}"
                )));
            }
        }
        for event in &self.events {
            if event.weights.len() != self.latent_dim {
                return Err(SimError::BadGroundTruth(format!(
                    "event `{}` weight dim {} != latent dim {}",
                    event.name,
                    event.weights.len(),
                    self.latent_dim
                )));
            }
        }
        if self.sigma_process <= 0.0 || self.sigma_obs <= 0.0 {
            return Err(SimError::BadGroundTruth("noise stds must be positive".into()));
        }
        if self.t_max == 0 {
            return Err(SimError::BadGroundTruth("t_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// True hazards for one (patient, event) pair, aligned with steps `1..=T`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleRecord {
    pub patient_id: String,
    pub event: String,
    pub lambda: Vec<f64>,
}

/// A simulated cohort with its oracle hazards and flat event rows.
pub struct SimulatedCohort {
    pub trajectories: Vec<Trajectory>,
    pub oracle: Vec<OracleRecord>,
    pub event_rows: Vec<EventRow>,
}

fn mat_vec(matrix: &[f64], input: &[f64], out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_dim];
    for (i, &v) in input.iter().enumerate() {
        let row = &matrix[i * out_dim..(i + 1) * out_dim];
        for j in 0..out_dim {
            out[j] += v * row[j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn simulate_patient(
    gt: &GroundTruth,
    patient_id: String,
    rng: &mut ChaCha20Rng,
) -> (Trajectory, Vec<OracleRecord>) {
    let episode_len = if rng.random::<f64>() < gt.early_censor_prob {
        rng.random_range(1..=gt.t_max)
    } else {
        gt.t_max
    };

    let normal = |rng: &mut ChaCha20Rng| -> f64 { StandardNormal.sample(rng) };

    let mut z_prev = vec![0.0; gt.latent_dim];
    let mut x_rows = Vec::with_capacity(episode_len);
    let mut u_rows = Vec::with_capacity(episode_len);
    let mut lambdas: Vec<Vec<f64>> = vec![Vec::with_capacity(episode_len); gt.events.len()];
    let mut fired: Vec<Option<usize>> = vec![None; gt.events.len()];

    for t in 1..=episode_len {
        let mut u: Vec<f64> = mat_vec(&gt.policy, &z_prev, gt.intervention_dim);
        for v in &mut u {
            *v += gt.sigma_intervention * normal(rng);
        }

        let z: Vec<f64> = if t == 1 {
            (0..gt.latent_dim).map(|_| normal(rng)).collect()
        } else {
            let mut z = mat_vec(&gt.transition, &z_prev, gt.latent_dim);
            let effect = mat_vec(&gt.intervention_effect, &u, gt.latent_dim);
            for (zi, ei) in z.iter_mut().zip(effect) {
                *zi += ei + gt.sigma_process * normal(rng);
            }
            z
        };

        let mut x = mat_vec(&gt.emission, &z, gt.obs_dim);
        for v in &mut x {
            *v += gt.sigma_obs * normal(rng);
        }

        for (event_idx, event) in gt.events.iter().enumerate() {
            let logit: f64 = event
                .weights
                .iter()
                .zip(&z)
                .map(|(w, zi)| w * zi)
                .sum::<f64>()
                + event.bias;
            let lambda = sigmoid(logit);
            lambdas[event_idx].push(lambda);
            if fired[event_idx].is_none() && rng.random::<f64>() < lambda {
                fired[event_idx] = Some(t);
            }
        }

        x_rows.push(x);
        u_rows.push(u);
        z_prev = z;
    }

    let events: BTreeMap<String, EventRecord> = gt
        .events
        .iter()
        .zip(&fired)
        .map(|(event, fire)| {
            let record = match fire {
                Some(t) => EventRecord::observed(*t),
                None => EventRecord::censored(episode_len),
            };
            (event.name.clone(), record)
        })
        .collect();

    let mask = vec![vec![1.0; gt.obs_dim]; episode_len];
    let trajectory = Trajectory {
        patient_id: patient_id.clone(),
        t_max: episode_len,
        x: x_rows,
        u: u_rows,
        mask,
        events,
    };
    let oracle = gt
        .events
        .iter()
        .zip(lambdas)
        .map(|(event, lambda)| OracleRecord {
            patient_id: patient_id.clone(),
            event: event.name.clone(),
            lambda,
        })
        .collect();
    (trajectory, oracle)
}

/// Simulates `n_patients` independent episodes. Per-patient generators are
/// derived as `seed XOR patient_index`, so output is independent of
/// generation order.
pub fn simulate_cohort(
    gt: &GroundTruth,
    n_patients: usize,
    seed: u64,
) -> Result<SimulatedCohort, SimError> {
    gt.validate()?;
    let mut trajectories = Vec::with_capacity(n_patients);
    let mut oracle = Vec::new();
    let mut event_rows = Vec::new();
    for idx in 0..n_patients {
        let patient_id = format!("sim-{idx:06}");
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ idx as u64);
        let (trajectory, patient_oracle) = simulate_patient(gt, patient_id.clone(), &mut rng);
        for (event, record) in &trajectory.events {
            event_rows.push(EventRow {
                patient_id: patient_id.clone(),
                event: event.clone(),
                // Bin midpoint, so discretization recovers the step index.
                time_hours: (record.t as f64 - 0.5) * gt.step_hours,
                censored: record.c,
            });
        }
        trajectories.push(trajectory);
        oracle.extend(patient_oracle);
    }
    Ok(SimulatedCohort {
        trajectories,
        oracle,
        event_rows,
    })
}

/// Writes `cohort.jsonl`, `events.csv`, and `oracle.jsonl` into `dir`.
pub fn write_cohort(dir: &Path, cohort: &SimulatedCohort) -> Result<(), SimError> {
    std::fs::create_dir_all(dir).map_err(|e| SimError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    data::write_cohort_jsonl(&dir.join("cohort.jsonl"), &cohort.trajectories)?;
    data::write_events_csv(&dir.join("events.csv"), &cohort.event_rows)?;
    let oracle_path = dir.join("oracle.jsonl");
    let file = File::create(&oracle_path).map_err(|e| SimError::Io {
        path: oracle_path.display().to_string(),
        source: e,
    })?;
    let mut writer = BufWriter::new(file);
    for record in &cohort.oracle {
        let line = serde_json::to_string(record).map_err(|e| {
            SimError::Data(DataError::Json {
                path: oracle_path.display().to_string(),
                source: e,
            })
        })?;
        writeln!(writer, "{line}").map_err(|e| SimError::Io {
            path: oracle_path.display().to_string(),
            source: e,
        })?;
    }
    writer.flush().map_err(|e| SimError::Io {
        path: oracle_path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn read_oracle(path: &Path) -> Result<Vec<OracleRecord>, SimError> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line).map_err(|e| {
                SimError::Data(DataError::Json {
                    path: path.display().to_string(),
                    source: e,
                })
            })
        })
        .collect()
}
