//! Cohort ingestion, preprocessing, and on-disk formats.
//!
//! Raw irregular records flow through harmonization, outlier removal,
//! z-scoring, time discretization, observation forward-fill, and the
//! intervention-continuation rule, producing regular-grid [`Trajectory`]
//! values. Statistics are computed on the training split only and carry a
//! provenance tag that is checked before they are applied anywhere else.

mod preprocess;

pub use preprocess::{
    compute_stats, discretize, harmonize, impute_interventions, impute_observations,
    percentile, preprocess_cohort, remove_outliers, step_of, zscore, PatientGrid,
    PreprocessOutput,
};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::fnv1a;
use crate::ssm::CohortSchema;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("unknown channel code `{code}` with strict harmonization")]
    UnknownChannelCode { code: String },
    #[error("channel `{name}` appears as both obs and intervention")]
    MixedChannelKind { name: String },
    #[error("record for patient `{patient_id}` has negative time {time_hours}")]
    NegativeTime { patient_id: String, time_hours: f64 },
    #[error("record for patient `{patient_id}` has non-finite value in channel `{channel}`")]
    NonFiniteValue { patient_id: String, channel: String },
    #[error("patient `{patient_id}` is missing event records for {missing:?}")]
    MissingEvents {
        patient_id: String,
        missing: Vec<String>,
    },
    #[error("no patients with both raw records and event records")]
    EmptyCohort,
    #[error("step duration must be positive, got {0}")]
    BadStepHours(f64),
    #[error("stats file has split `{split}`, expected `train`")]
    BadStatsProvenance { split: String },
    #[error("trajectory for `{patient_id}` is inconsistent: {detail}")]
    BadTrajectory { patient_id: String, detail: String },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Whether a channel carries measurements or clinician actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Obs,
    Intervention,
}

/// One raw, irregularly-timed record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawEvent {
    pub patient_id: String,
    pub time_hours: f64,
    pub channel_kind: ChannelKind,
    pub channel_name: String,
    pub value: f64,
}

/// One row of the events file: when an event was observed or censored,
/// in absolute hours from the start of the record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EventRow {
    pub patient_id: String,
    pub event: String,
    pub time_hours: f64,
    pub censored: u8,
}

/// Per-event outcome on the discrete grid: step index `t` (1-based) and the
/// censorship flag. For censored events `t` is the censor step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: usize,
    pub c: u8,
}

impl EventRecord {
    pub fn observed(t: usize) -> Self {
        EventRecord { t, c: 0 }
    }

    pub fn censored(t: usize) -> Self {
        EventRecord { t, c: 1 }
    }

    pub fn is_censored(&self) -> bool {
        self.c != 0
    }
}

/// One patient's regular-grid series with masks and per-event outcomes.
///
/// `x` is `T x O`, `u` is `T x I`, `mask` is `T x O` with 1 where the bin
/// had at least one raw observation. Masked-out entries of `x` hold the
/// imputed value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub patient_id: String,
    #[serde(rename = "T")]
    pub t_max: usize,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub mask: Vec<Vec<f64>>,
    pub events: BTreeMap<String, EventRecord>,
}

impl Trajectory {
    /// Checks internal consistency and the absence of non-finite values.
    pub fn validate(&self, obs_dim: usize, intervention_dim: usize) -> Result<(), DataError> {
        let bad = |detail: String| DataError::BadTrajectory {
            patient_id: self.patient_id.clone(),
            detail,
        };
        if self.t_max == 0 {
            return Err(bad("T must be >= 1".into()));
        }
        for (name, rows, dim) in [
            ("x", &self.x, obs_dim),
            ("u", &self.u, intervention_dim),
            ("mask", &self.mask, obs_dim),
        ] {
            if rows.len() != self.t_max {
                return Err(bad(format!("{name} has {} rows, T = {}", rows.len(), self.t_max)));
            }
            for row in rows {
                if row.len() != dim {
                    return Err(bad(format!("{name} row width {} != {dim}", row.len())));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(bad(format!("{name} contains a non-finite value")));
                }
            }
        }
        for (event, record) in &self.events {
            if record.t == 0 || record.t > self.t_max {
                return Err(bad(format!(
                    "event `{event}` at step {} outside [1, {}]",
                    record.t, self.t_max
                )));
            }
        }
        Ok(())
    }
}

/// Train/eval/test assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Test => "test",
        }
    }
}

/// 80/10/10 assignment from a stable hash of the patient id.
pub fn split_for(patient_id: &str) -> Split {
    match fnv1a(patient_id) % 10 {
        0..=7 => Split::Train,
        8 => Split::Eval,
        _ => Split::Test,
    }
}

/// Per-channel preprocessing statistics, training split only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelStats {
    pub kind: ChannelKind,
    pub mean: f64,
    pub std: f64,
    pub p1: f64,
    pub p99: f64,
    /// 90th percentile of inter-administration gaps (hours); `None` when the
    /// training split never saw two administrations of the channel.
    pub gap90: Option<f64>,
}

/// All statistics needed to apply preprocessing to any split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreprocessStats {
    /// Provenance tag; must be `train`.
    pub split: String,
    pub step_hours: f64,
    pub obs_channels: Vec<String>,
    pub intervention_channels: Vec<String>,
    pub channels: BTreeMap<String, ChannelStats>,
}

impl PreprocessStats {
    pub fn schema(&self, events: Vec<String>, latent_dim: usize) -> CohortSchema {
        CohortSchema {
            obs_dim: self.obs_channels.len(),
            intervention_dim: self.intervention_channels.len(),
            latent_dim,
            events,
            step_hours: self.step_hours,
        }
    }
}

/// Rewrites raw channel codes to canonical names with a unit scale.
#[derive(Clone, Debug, Default)]
pub struct HarmonizationMap {
    pub rules: BTreeMap<String, (String, f64)>,
}

#[derive(Debug, Deserialize)]
struct HarmonizationRow {
    source_code: String,
    canonical_name: String,
    unit_scale: f64,
}

pub fn read_raw_csv(path: &Path) -> Result<Vec<RawEvent>, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|source| DataError::Csv {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let event: RawEvent = row.map_err(|source| DataError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        if event.time_hours < 0.0 || !event.time_hours.is_finite() {
            return Err(DataError::NegativeTime {
                patient_id: event.patient_id,
                time_hours: event.time_hours,
            });
        }
        if !event.value.is_finite() {
            return Err(DataError::NonFiniteValue {
                patient_id: event.patient_id,
                channel: event.channel_name,
            });
        }
        out.push(event);
    }
    Ok(out)
}

pub fn read_events_csv(path: &Path) -> Result<Vec<EventRow>, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|source| DataError::Csv {
        path: path.display().to_string(),
        source,
    })?;
    reader
        .deserialize()
        .map(|row| {
            row.map_err(|source| DataError::Csv {
                path: path.display().to_string(),
                source,
            })
        })
        .collect()
}

pub fn write_events_csv(path: &Path, rows: &[EventRow]) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path).map_err(|source| DataError::Csv {
        path: path.display().to_string(),
        source,
    })?;
    for row in rows {
        writer.serialize(row).map_err(|source| DataError::Csv {
            path: path.display().to_string(),
            source,
        })?;
    }
    writer.flush().map_err(|e| DataError::io(path, e))?;
    Ok(())
}

pub fn read_harmonization_csv(path: &Path) -> Result<HarmonizationMap, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|source| DataError::Csv {
        path: path.display().to_string(),
        source,
    })?;
    let mut map = HarmonizationMap::default();
    for row in reader.deserialize() {
        let row: HarmonizationRow = row.map_err(|source| DataError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        map.rules
            .insert(row.source_code, (row.canonical_name, row.unit_scale));
    }
    Ok(map)
}

/// One trajectory per line, in the order given.
pub fn write_cohort_jsonl(path: &Path, trajectories: &[Trajectory]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for trajectory in trajectories {
        let line = serde_json::to_string(trajectory).map_err(|source| DataError::Json {
            path: path.display().to_string(),
            source,
        })?;
        writeln!(writer, "{line}").map_err(|e| DataError::io(path, e))?;
    }
    writer.flush().map_err(|e| DataError::io(path, e))?;
    Ok(())
}

pub fn read_cohort_jsonl(path: &Path) -> Result<Vec<Trajectory>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let trajectory: Trajectory =
            serde_json::from_str(&line).map_err(|source| DataError::Json {
                path: path.display().to_string(),
                source,
            })?;
        out.push(trajectory);
    }
    Ok(out)
}

pub fn write_stats(path: &Path, stats: &PreprocessStats) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(stats).map_err(|source| DataError::Json {
        path: path.display().to_string(),
        source,
    })?;
    std::fs::write(path, json).map_err(|e| DataError::io(path, e))
}

/// Loads stats for application, refusing anything not computed on the
/// training split (leakage guard).
pub fn read_stats(path: &Path) -> Result<PreprocessStats, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let stats: PreprocessStats = serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.display().to_string(),
        source,
    })?;
    if stats.split != "train" {
        return Err(DataError::BadStatsProvenance { split: stats.split });
    }
    Ok(stats)
}

/// Dims and event catalog implied by a loaded cohort; validates every
/// trajectory against them.
pub fn infer_cohort_shape(
    trajectories: &[Trajectory],
) -> Result<(usize, usize, Vec<String>), DataError> {
    let first = trajectories.first().ok_or(DataError::EmptyCohort)?;
    let obs_dim = first.x.first().map_or(0, Vec::len);
    let intervention_dim = first.u.first().map_or(0, Vec::len);
    let events: Vec<String> = first.events.keys().cloned().collect();
    for trajectory in trajectories {
        trajectory.validate(obs_dim, intervention_dim)?;
        let keys: Vec<String> = trajectory.events.keys().cloned().collect();
        if keys != events {
            return Err(DataError::MissingEvents {
                patient_id: trajectory.patient_id.clone(),
                missing: events
                    .iter()
                    .filter(|e| !trajectory.events.contains_key(*e))
                    .cloned()
                    .collect(),
            });
        }
    }
    Ok((obs_dim, intervention_dim, events))
}
