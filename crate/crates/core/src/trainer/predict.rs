//! Prediction roll-outs and censoring-aware evaluation reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, TrainError, STREAM_PREDICT};
use crate::data::{EventRecord, EventRow, Trajectory};
use crate::diffcore::Tape;
use crate::inference::encode;
use crate::metrics::{
    auc_roc, average_precision, c_index, trajectory_correlation, window_label, MetricError,
    ScoredSubject, WindowLabel,
};
use crate::seeds;
use crate::ssm::CohortSchema;
use crate::survival::{risk_score, rollout, survival_from_hazard, RolloutMode};

/// Header line of a predictions file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionsHeader {
    pub schema: CohortSchema,
    pub t_star_hours: f64,
    pub t_star_step: usize,
    pub horizon: usize,
    pub seed: u64,
}

/// Per-patient hazard trajectories, one per event, each of length `horizon`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub hazards: BTreeMap<String, Vec<f64>>,
}

/// A predictions file in memory.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub header: PredictionsHeader,
    pub records: Vec<PatientPrediction>,
    /// Patients whose record ended before the prediction time.
    pub skipped: Vec<String>,
}

fn encode_to_z_star(
    model: &Model,
    trajectory: &Trajectory,
    t_star_step: usize,
    seed: u64,
) -> Result<Vec<f64>, TrainError> {
    let mut truncated = trajectory.clone();
    truncated.t_max = t_star_step;
    truncated.x.truncate(t_star_step);
    truncated.u.truncate(t_star_step);
    truncated.mask.truncate(t_star_step);
    // Events play no role in encoding; keep records valid for the
    // truncated horizon.
    truncated.events.clear();

    let tape = Tape::new();
    let bound = model.bind(&tape);
    let sample_seed = seeds::derive(
        seed,
        &[STREAM_PREDICT, seeds::fnv1a(&trajectory.patient_id)],
    );
    let posterior = encode(&tape, &bound.encoder, &truncated, sample_seed)?;
    Ok(posterior.steps.last().unwrap().q.mean.value().data().to_vec())
}

/// Encodes each patient up to the prediction time and rolls the generative
/// model forward from the posterior mean, in mean mode.
///
/// `t_star_hours` maps to the last fully elapsed step,
/// `floor(t_star / step_hours)`; patients with shorter records are skipped
/// and reported. Per-patient sampling seeds derive from the patient id, so
/// results are independent of `threads`.
pub fn predict(
    model: &Model,
    cohort: &[Trajectory],
    t_star_hours: f64,
    horizon: usize,
    seed: u64,
    threads: usize,
) -> Result<Predictions, TrainError> {
    let step_hours = model.schema.step_hours;
    let t_star_step = (t_star_hours / step_hours).floor() as usize;
    if t_star_step == 0 {
        return Err(TrainError::BadConfig(format!(
            "prediction time {t_star_hours}h is before the first full step ({step_hours}h)"
        )));
    }
    if horizon == 0 {
        return Err(TrainError::BadConfig("horizon must be >= 1".into()));
    }

    let mut skipped = Vec::new();
    let mut usable: Vec<&Trajectory> = Vec::new();
    for trajectory in cohort {
        if trajectory.t_max < t_star_step {
            skipped.push(trajectory.patient_id.clone());
        } else {
            usable.push(trajectory);
        }
    }

    let encoded: Vec<Result<Vec<f64>, TrainError>> = if threads <= 1 || usable.len() < 2 {
        usable
            .iter()
            .map(|t| encode_to_z_star(model, t, t_star_step, seed))
            .collect()
    } else {
        let chunk_size = usable.len().div_ceil(threads.min(usable.len()));
        std::thread::scope(|scope| {
            let handles: Vec<_> = usable
                .chunks(chunk_size)
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|t| encode_to_z_star(model, t, t_star_step, seed))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("encode worker panicked"))
                .collect()
        })
    };
    let mut z_stars: Vec<(String, Vec<f64>)> = Vec::with_capacity(usable.len());
    for (trajectory, z) in usable.iter().zip(encoded) {
        z_stars.push((trajectory.patient_id.clone(), z?));
    }

    let mut records = Vec::with_capacity(z_stars.len());
    if !z_stars.is_empty() {
        // One batched roll-out over all patients.
        let batch = z_stars.len();
        let latent = model.schema.latent_dim;
        let mut stacked = Vec::with_capacity(batch * latent);
        for (_, z) in &z_stars {
            stacked.extend_from_slice(z);
        }
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let z0 = tape.constant(crate::diffcore::Tensor::new(vec![batch, latent], stacked)?);
        let result = rollout(&tape, &bound.generative, z0, horizon, RolloutMode::Mean, seed)?;
        for (patient_idx, (patient_id, _)) in z_stars.iter().enumerate() {
            let mut hazards = BTreeMap::new();
            for (event_idx, event) in result.events.iter().enumerate() {
                hazards.insert(
                    event.clone(),
                    result.hazards[event_idx][patient_idx].clone(),
                );
            }
            records.push(PatientPrediction {
                patient_id: patient_id.clone(),
                hazards,
            });
        }
    }

    Ok(Predictions {
        header: PredictionsHeader {
            schema: model.schema.clone(),
            t_star_hours,
            t_star_step,
            horizon,
            seed,
        },
        records,
        skipped,
    })
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: PredictionsHeader,
    skipped: Vec<String>,
}

pub fn write_predictions(path: &Path, predictions: &Predictions) -> Result<(), TrainError> {
    let io_err = |e: std::io::Error| TrainError::CheckpointIo {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let json_err = |e: serde_json::Error| TrainError::CheckpointFormat {
        detail: e.to_string(),
    };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    let header = HeaderLine {
        header: predictions.header.clone(),
        skipped: predictions.skipped.clone(),
    };
    writeln!(writer, "{}", serde_json::to_string(&header).map_err(json_err)?).map_err(io_err)?;
    for record in &predictions.records {
        writeln!(writer, "{}", serde_json::to_string(record).map_err(json_err)?)
            .map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Predictions, TrainError> {
    let io_err = |e: std::io::Error| TrainError::CheckpointIo {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let file = File::open(path).map_err(io_err)?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| TrainError::CheckpointFormat {
            detail: "empty predictions file".into(),
        })?
        .map_err(io_err)?;
    let header: HeaderLine =
        serde_json::from_str(&first).map_err(|e| TrainError::CheckpointFormat {
            detail: format!("bad predictions header: {e}"),
        })?;
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| TrainError::CheckpointFormat {
                detail: format!("bad prediction record: {e}"),
            })?,
        );
    }
    Ok(Predictions {
        header: header.header,
        records,
        skipped: header.skipped,
    })
}

/// One row of the metrics report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub event: String,
    pub window_hours: Option<f64>,
    pub value: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_excluded: usize,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn find(&self, metric: &str, event: &str, window_hours: Option<f64>) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.event == event && r.window_hours == window_hours)
    }
}

pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<(), TrainError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| TrainError::CheckpointIo {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    for row in &report.rows {
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

#[derive(Clone, Copy, Debug, Default)]
pub struct EvaluateOptions {
    /// When set, the C-index risk is the event probability within this
    /// window instead of the full horizon.
    pub c_index_window_hours: Option<f64>,
}

fn undefined_note(err: &MetricError) -> String {
    err.to_string()
}

/// Scores predictions against the events file: per-event C-index, and
/// AUC-ROC / average precision inside each fixed window, with the
/// censoring-aware three-way labeling.
///
/// Event times are re-expressed relative to the prediction step; an event
/// observed at or before it (or a record censored by then) is excluded.
pub fn evaluate(
    predictions: &Predictions,
    event_rows: &[EventRow],
    windows_hours: &[f64],
    options: &EvaluateOptions,
) -> Result<MetricsReport, TrainError> {
    let header = &predictions.header;
    let step_hours = header.schema.step_hours;
    let t_star = header.t_star_step;
    let horizon = header.horizon;

    let mut event_lookup: BTreeMap<(String, String), &EventRow> = BTreeMap::new();
    for row in event_rows {
        event_lookup.insert((row.patient_id.clone(), row.event.clone()), row);
    }

    let mut report = MetricsReport::default();
    for event in &header.schema.events {
        // Relative records and curves for every usable patient.
        let mut subjects: Vec<(ScoredSubject, EventRecord, crate::survival::SurvivalCurve)> =
            Vec::new();
        let mut excluded_before = 0usize;
        let mut n_observed = 0usize;
        let mut n_censored = 0usize;
        for record in &predictions.records {
            let Some(row) = event_lookup.get(&(record.patient_id.clone(), event.clone())) else {
                continue;
            };
            let absolute_step = crate::data::step_of(row.time_hours, step_hours);
            if absolute_step <= t_star {
                excluded_before += 1;
                continue;
            }
            let relative = EventRecord {
                t: (absolute_step - t_star).min(horizon.max(1)),
                c: row.censored,
            };
            let hazards = &record.hazards[event];
            let curve = survival_from_hazard(hazards)?;
            let risk = match options.c_index_window_hours {
                Some(w_hours) => {
                    let w = window_steps(w_hours, step_hours, horizon);
                    risk_score(&curve, w)?
                }
                None => 1.0 - curve.survival_at(horizon),
            };
            if relative.is_censored() {
                n_censored += 1;
            } else {
                n_observed += 1;
            }
            subjects.push((
                ScoredSubject {
                    patient_id: record.patient_id.clone(),
                    risk,
                    event_time: relative.t,
                    censored: relative.is_censored(),
                },
                relative,
                curve,
            ));
        }

        let scored: Vec<ScoredSubject> = subjects.iter().map(|(s, _, _)| s.clone()).collect();
        let (value, note) = match c_index(&scored) {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(undefined_note(&e))),
        };
        report.rows.push(MetricRow {
            metric: "c_index".into(),
            event: event.clone(),
            window_hours: None,
            value,
            n_pos: n_observed,
            n_neg: n_censored,
            n_excluded: excluded_before,
            note,
        });

        for &w_hours in windows_hours {
            let w = window_steps(w_hours, step_hours, horizon);
            let mut labeled: Vec<(f64, bool)> = Vec::new();
            let mut n_excluded = excluded_before;
            for (_, relative, curve) in &subjects {
                let score = risk_score(curve, w)?;
                match window_label(relative, w) {
                    WindowLabel::Positive => labeled.push((score, true)),
                    WindowLabel::Negative => labeled.push((score, false)),
                    WindowLabel::Excluded => n_excluded += 1,
                }
            }
            let n_pos = labeled.iter().filter(|(_, l)| *l).count();
            let n_neg = labeled.len() - n_pos;
            for (metric, result) in [
                ("auc_roc", auc_roc(&labeled)),
                ("average_precision", average_precision(&labeled)),
            ] {
                let (value, note) = match result {
                    Ok(v) => (Some(v), None),
                    Err(e) => (None, Some(undefined_note(&e))),
                };
                report.rows.push(MetricRow {
                    metric: metric.into(),
                    event: event.clone(),
                    window_hours: Some(w_hours),
                    value,
                    n_pos,
                    n_neg,
                    n_excluded,
                    note,
                });
            }
        }
    }
    Ok(report)
}

fn window_steps(window_hours: f64, step_hours: f64, horizon: usize) -> usize {
    ((window_hours / step_hours).floor() as usize)
        .max(1)
        .min(horizon)
}

/// Pearson correlation between two events' predicted trajectories, per
/// patient.
pub fn prediction_correlations(
    predictions: &Predictions,
    event_a: &str,
    event_b: &str,
) -> Vec<(String, Result<f64, MetricError>)> {
    predictions
        .records
        .iter()
        .map(|record| {
            (
                record.patient_id.clone(),
                trajectory_correlation(&record.hazards[event_a], &record.hazards[event_b]),
            )
        })
        .collect()
}

#[derive(Serialize)]
struct TrajectoryRow<'a> {
    patient_id: &'a str,
    event: &'a str,
    tau_step: usize,
    tau_hours: f64,
    hazard: f64,
    survival: f64,
}

/// Writes the plot-ready long form: one row per (patient, event, tau).
pub fn export_trajectories(path: &Path, predictions: &Predictions) -> Result<(), TrainError> {
    let step_hours = predictions.header.schema.step_hours;
    let mut writer = csv::Writer::from_path(path).map_err(|e| TrainError::CheckpointIo {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    for record in &predictions.records {
        for (event, hazards) in &record.hazards {
            let curve = survival_from_hazard(hazards)?;
            for (idx, &hazard) in hazards.iter().enumerate() {
                let tau = idx + 1;
                writer
                    .serialize(TrajectoryRow {
                        patient_id: &record.patient_id,
                        event,
                        tau_step: tau,
                        tau_hours: tau as f64 * step_hours,
                        hazard,
                        survival: curve.survival_at(tau),
                    })
                    .map_err(|e| TrainError::CheckpointIo {
                        path: path.display().to_string(),
                        detail: e.to_string(),
                    })?;
            }
        }
    }
    writer.flush().map_err(|e| TrainError::CheckpointIo {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcohort::{simulate_cohort, GroundTruth};
    use crate::trainer::{train, TrainConfig};

    fn trained() -> (crate::trainer::Model, Vec<Trajectory>, Vec<EventRow>) {
        let gt = GroundTruth::demo(10);
        let sim = simulate_cohort(&gt, 40, 21).unwrap();
        let config = TrainConfig {
            learning_rate: 0.01,
            batch_size: 10,
            epochs: 2,
            latent_dim: 2,
            recurrent_hidden: 5,
            mlp_units: 4,
            mlp_layers: 1,
            linear_model: true,
            w_rec: 1.0,
            kl_weight: 1.0,
            grad_clip: None,
            seed: 3,
            step_hours: 12.0,
            rollout_horizon: 8,
        };
        let outcome = train(&config, &sim.trajectories, None).unwrap();
        (outcome.model, sim.trajectories, sim.event_rows)
    }

    #[test]
    fn predict_is_deterministic_and_skips_short_records() {
        let (model, cohort, _) = trained();
        let a = predict(&model, &cohort, 48.0, 8, 11, 1).unwrap();
        let b = predict(&model, &cohort, 48.0, 8, 11, 1).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.patient_id, rb.patient_id);
            for (event, ha) in &ra.hazards {
                let hb = &rb.hazards[event];
                assert!(ha.iter().zip(hb).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
        // Early-censored patients (t_max < 4 steps) are skipped, not dropped
        // silently.
        let short = cohort.iter().filter(|t| t.t_max < 4).count();
        assert_eq!(a.skipped.len(), short);
        assert_eq!(a.records.len() + a.skipped.len(), cohort.len());
    }

    #[test]
    fn thread_count_does_not_change_predictions() {
        let (model, cohort, _) = trained();
        let sequential = predict(&model, &cohort, 48.0, 8, 11, 1).unwrap();
        let parallel = predict(&model, &cohort, 48.0, 8, 11, 4).unwrap();
        assert_eq!(sequential.records.len(), parallel.records.len());
        for (a, b) in sequential.records.iter().zip(&parallel.records) {
            assert_eq!(a.patient_id, b.patient_id);
            for (event, ha) in &a.hazards {
                assert!(ha
                    .iter()
                    .zip(&b.hazards[event])
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn single_step_horizon_produces_single_step_trajectories() {
        let (model, cohort, _) = trained();
        let predictions = predict(&model, &cohort, 48.0, 1, 0, 1).unwrap();
        for record in &predictions.records {
            for hazards in record.hazards.values() {
                assert_eq!(hazards.len(), 1);
            }
        }
    }

    #[test]
    fn predict_matches_manual_encode_then_rollout() {
        let (model, cohort, _) = trained();
        let predictions = predict(&model, &cohort, 48.0, 6, 5, 1).unwrap();
        let record = &predictions.records[0];
        let trajectory = cohort
            .iter()
            .find(|t| t.patient_id == record.patient_id)
            .unwrap();

        let mut truncated = trajectory.clone();
        truncated.t_max = 4;
        truncated.x.truncate(4);
        truncated.u.truncate(4);
        truncated.mask.truncate(4);
        truncated.events.clear();

        let tape = Tape::new();
        let bound = model.bind(&tape);
        let sample_seed = seeds::derive(5, &[STREAM_PREDICT, seeds::fnv1a(&record.patient_id)]);
        let posterior = encode(&tape, &bound.encoder, &truncated, sample_seed).unwrap();
        let z_star = posterior.steps.last().unwrap().q.mean;
        let result = rollout(&tape, &bound.generative, z_star, 6, RolloutMode::Mean, 5).unwrap();
        for (event_idx, event) in result.events.iter().enumerate() {
            let manual = &result.hazards[event_idx][0];
            let from_predict = &record.hazards[event];
            assert!(manual
                .iter()
                .zip(from_predict)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn predictions_file_round_trips() {
        let (model, cohort, _) = trained();
        let predictions = predict(&model, &cohort, 48.0, 4, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.jsonl");
        write_predictions(&path, &predictions).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back.header.t_star_step, 4);
        assert_eq!(back.records.len(), predictions.records.len());
        assert_eq!(back.skipped, predictions.skipped);
        for (a, b) in predictions.records.iter().zip(&back.records) {
            assert_eq!(a.patient_id, b.patient_id);
            for (event, ha) in &a.hazards {
                assert!(ha
                    .iter()
                    .zip(&b.hazards[event])
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn evaluate_reports_one_c_index_row_per_event() {
        let (model, cohort, event_rows) = trained();
        let predictions = predict(&model, &cohort, 48.0, 8, 0, 1).unwrap();
        let report = evaluate(&predictions, &event_rows, &[24.0, 48.0], &EvaluateOptions::default())
            .unwrap();
        for event in ["event_a", "event_b", "event_c"] {
            assert!(report.find("c_index", event, None).is_some());
            assert!(report.find("auc_roc", event, Some(24.0)).is_some());
            assert!(report.find("average_precision", event, Some(48.0)).is_some());
        }
        // 3 events x (1 c-index + 2 windows x 2 metrics).
        assert_eq!(report.rows.len(), 15);
    }

    #[test]
    fn evaluate_single_patient_reports_undefined_c_index() {
        let (model, cohort, event_rows) = trained();
        let full = predict(&model, &cohort, 48.0, 8, 0, 1).unwrap();
        let single = Predictions {
            header: full.header.clone(),
            records: vec![full.records[0].clone()],
            skipped: vec![],
        };
        let report =
            evaluate(&single, &event_rows, &[24.0], &EvaluateOptions::default()).unwrap();
        let row = report.find("c_index", "event_a", None).unwrap();
        assert!(row.value.is_none());
        assert!(row.note.is_some());
    }

    #[test]
    fn equal_risks_give_half_auc_in_report() {
        let (model, cohort, event_rows) = trained();
        let mut predictions = predict(&model, &cohort, 48.0, 8, 0, 1).unwrap();
        for record in &mut predictions.records {
            for hazards in record.hazards.values_mut() {
                hazards.fill(0.05);
            }
        }
        let report =
            evaluate(&predictions, &event_rows, &[24.0], &EvaluateOptions::default()).unwrap();
        for event in ["event_a", "event_b", "event_c"] {
            let row = report.find("auc_roc", event, Some(24.0)).unwrap();
            if let Some(value) = row.value {
                assert_eq!(value, 0.5, "{event}");
            }
        }
    }

    #[test]
    fn export_writes_one_row_per_patient_event_step() {
        let (model, cohort, _) = trained();
        let predictions = predict(&model, &cohort, 48.0, 5, 0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectories.csv");
        export_trajectories(&path, &predictions).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let line_count = text.lines().count();
        assert_eq!(line_count, 1 + predictions.records.len() * 3 * 5);
        assert!(text.starts_with("patient_id,event,tau_step,tau_hours,hazard,survival"));
    }
}
