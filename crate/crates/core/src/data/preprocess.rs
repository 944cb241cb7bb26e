//! Preprocessing pipeline: harmonization, outlier removal, z-scoring,
//! discretization, and imputation.
//!
//! Statistics flow: percentiles come from harmonized training-split values,
//! outliers are dropped against those percentiles, then mean/std are taken
//! over the cleaned training values. Every stage is deterministic.

use std::collections::{BTreeMap, BTreeSet};

use super::{
    ChannelKind, ChannelStats, DataError, EventRecord, EventRow, HarmonizationMap,
    PreprocessStats, RawEvent, Split, Trajectory,
};

/// Linear-interpolation percentile of a non-empty sorted slice, `q` in [0,1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Rewrites channel codes to canonical names and applies unit scales.
/// Unknown codes are dropped unless `strict`, in which case they error.
pub fn harmonize(
    stream: Vec<RawEvent>,
    map: &HarmonizationMap,
    strict: bool,
) -> Result<(Vec<RawEvent>, usize), DataError> {
    if map.rules.is_empty() {
        return Ok((stream, 0));
    }
    let mut out = Vec::with_capacity(stream.len());
    let mut dropped = 0usize;
    for mut event in stream {
        match map.rules.get(&event.channel_name) {
            Some((canonical, scale)) => {
                event.channel_name = canonical.clone();
                event.value *= scale;
                out.push(event);
            }
            None if strict => {
                return Err(DataError::UnknownChannelCode {
                    code: event.channel_name,
                })
            }
            None => dropped += 1,
        }
    }
    Ok((out, dropped))
}

/// Drops rows outside `[0.1 * p1, 10 * p99]` (strict inequalities, so the
/// boundary values themselves are kept). Channels without stats pass through.
pub fn remove_outliers(stream: Vec<RawEvent>, stats: &PreprocessStats) -> Vec<RawEvent> {
    stream
        .into_iter()
        .filter(|event| match stats.channels.get(&event.channel_name) {
            Some(ch) => event.value >= 0.1 * ch.p1 && event.value <= 10.0 * ch.p99,
            None => true,
        })
        .collect()
}

/// Replaces each value with `(value - mean) / std`. Channels without stats
/// (e.g. dropped for zero variance) are removed from the stream.
pub fn zscore(stream: Vec<RawEvent>, stats: &PreprocessStats) -> Vec<RawEvent> {
    stream
        .into_iter()
        .filter_map(|mut event| {
            let ch = stats.channels.get(&event.channel_name)?;
            event.value = (event.value - ch.mean) / ch.std;
            Some(event)
        })
        .collect()
}

/// Computes per-channel stats from the training split of a harmonized
/// stream. Returns the stats plus human-readable warnings (zero-variance
/// channels that were excluded).
pub fn compute_stats(
    harmonized: &[RawEvent],
    step_hours: f64,
) -> Result<(PreprocessStats, Vec<String>), DataError> {
    if step_hours <= 0.0 || !step_hours.is_finite() {
        return Err(DataError::BadStepHours(step_hours));
    }
    let train: Vec<&RawEvent> = harmonized
        .iter()
        .filter(|e| super::split_for(&e.patient_id) == Split::Train)
        .collect();

    // Channel kind consistency and raw value pools.
    let mut kinds: BTreeMap<String, ChannelKind> = BTreeMap::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for event in &train {
        match kinds.get(&event.channel_name) {
            Some(kind) if *kind != event.channel_kind => {
                return Err(DataError::MixedChannelKind {
                    name: event.channel_name.clone(),
                })
            }
            Some(_) => {}
            None => {
                kinds.insert(event.channel_name.clone(), event.channel_kind);
            }
        }
        values
            .entry(event.channel_name.clone())
            .or_default()
            .push(event.value);
    }

    let mut percentiles: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for (name, vals) in &mut values {
        vals.sort_by(f64::total_cmp);
        percentiles.insert(name.clone(), (percentile(vals, 0.01), percentile(vals, 0.99)));
    }

    // Mean/std over the outlier-cleaned training values.
    let mut channels: BTreeMap<String, ChannelStats> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (name, vals) in &values {
        let (p1, p99) = percentiles[name];
        let kept: Vec<f64> = vals
            .iter()
            .copied()
            .filter(|v| *v >= 0.1 * p1 && *v <= 10.0 * p99)
            .collect();
        if kept.is_empty() {
            warnings.push(format!("channel `{name}`: no values survive outlier removal"));
            continue;
        }
        let mean = kept.iter().sum::<f64>() / kept.len() as f64;
        let var = kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / kept.len() as f64;
        let std = var.sqrt();
        if std <= 0.0 {
            warnings.push(format!("channel `{name}`: zero variance, excluded"));
            continue;
        }
        channels.insert(
            name.clone(),
            ChannelStats {
                kind: kinds[name],
                mean,
                std,
                p1,
                p99,
                gap90: None,
            },
        );
    }

    // 90th percentile of inter-administration gaps, pooled over training
    // patients, per intervention channel.
    let mut admin_times: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for event in &train {
        if event.channel_kind == ChannelKind::Intervention {
            admin_times
                .entry((event.channel_name.clone(), event.patient_id.clone()))
                .or_default()
                .push(event.time_hours);
        }
    }
    let mut gaps: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((channel, _), mut times) in admin_times {
        times.sort_by(f64::total_cmp);
        let pool = gaps.entry(channel).or_default();
        pool.extend(times.windows(2).map(|w| w[1] - w[0]));
    }
    for (channel, mut pool) in gaps {
        if let Some(stats) = channels.get_mut(&channel) {
            if !pool.is_empty() {
                pool.sort_by(f64::total_cmp);
                stats.gap90 = Some(percentile(&pool, 0.9));
            }
        }
    }

    let obs_channels: Vec<String> = channels
        .iter()
        .filter(|(_, s)| s.kind == ChannelKind::Obs)
        .map(|(n, _)| n.clone())
        .collect();
    let intervention_channels: Vec<String> = channels
        .iter()
        .filter(|(_, s)| s.kind == ChannelKind::Intervention)
        .map(|(n, _)| n.clone())
        .collect();

    Ok((
        PreprocessStats {
            split: "train".into(),
            step_hours,
            obs_channels,
            intervention_channels,
            channels,
        },
        warnings,
    ))
}

/// One patient's gridded series before tensorization. Cells hold the
/// last-by-timestamp raw value of the bin, or `None` when the bin was empty.
#[derive(Clone, Debug)]
pub struct PatientGrid {
    pub t_max: usize,
    /// `[T][O]`
    pub obs: Vec<Vec<Option<f64>>>,
    /// `[T][I]`
    pub interventions: Vec<Vec<Option<f64>>>,
}

/// Step index for an absolute time: `floor(time / step) + 1`.
pub fn step_of(time_hours: f64, step_hours: f64) -> usize {
    (time_hours / step_hours).floor() as usize + 1
}

/// Bins one patient's stream onto the regular grid ending at `end_hours`.
/// Within a bin the last value by timestamp wins (ties: later row wins).
pub fn discretize(
    stream: &[RawEvent],
    stats: &PreprocessStats,
    end_hours: f64,
) -> Result<PatientGrid, DataError> {
    let step = stats.step_hours;
    let t_max = step_of(end_hours, step).max(1);
    let obs_index: BTreeMap<&str, usize> = stats
        .obs_channels
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let int_index: BTreeMap<&str, usize> = stats
        .intervention_channels
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut obs_latest: Vec<Vec<Option<(f64, f64)>>> =
        vec![vec![None; obs_index.len()]; t_max];
    let mut int_latest: Vec<Vec<Option<(f64, f64)>>> =
        vec![vec![None; int_index.len()]; t_max];

    for event in stream {
        if event.time_hours < 0.0 {
            return Err(DataError::NegativeTime {
                patient_id: event.patient_id.clone(),
                time_hours: event.time_hours,
            });
        }
        let bin = step_of(event.time_hours, step).min(t_max) - 1;
        let (slot, idx) = match event.channel_kind {
            ChannelKind::Obs => match obs_index.get(event.channel_name.as_str()) {
                Some(&i) => (&mut obs_latest[bin], i),
                None => continue,
            },
            ChannelKind::Intervention => match int_index.get(event.channel_name.as_str()) {
                Some(&i) => (&mut int_latest[bin], i),
                None => continue,
            },
        };
        let keep = match slot[idx] {
            Some((ts, _)) => event.time_hours >= ts,
            None => true,
        };
        if keep {
            slot[idx] = Some((event.time_hours, event.value));
        }
    }

    Ok(PatientGrid {
        t_max,
        obs: obs_latest
            .into_iter()
            .map(|row| row.into_iter().map(|c| c.map(|(_, v)| v)).collect())
            .collect(),
        interventions: int_latest
            .into_iter()
            .map(|row| row.into_iter().map(|c| c.map(|(_, v)| v)).collect())
            .collect(),
    })
}

/// Forward-fills observation channels; bins before the first value stay
/// `None` (tensorized later as 0, the z-scored mean, with mask 0).
pub fn impute_observations(grid: &mut PatientGrid) {
    let channels = grid.obs.first().map_or(0, Vec::len);
    for ch in 0..channels {
        let mut last: Option<f64> = None;
        for row in &mut grid.obs {
            match row[ch] {
                Some(v) => last = Some(v),
                None => row[ch] = last,
            }
        }
    }
}

/// Applies the continuation rule to intervention channels: a gap between two
/// recorded administrations no longer than the channel's gap90 threshold is
/// treated as the earlier setting continuing; anything else is no action (0).
pub fn impute_interventions(grid: &mut PatientGrid, stats: &PreprocessStats) {
    for (ch, name) in stats.intervention_channels.iter().enumerate() {
        let threshold = stats.channels.get(name).and_then(|s| s.gap90);
        let recorded: Vec<usize> = (0..grid.t_max)
            .filter(|&t| grid.interventions[t][ch].is_some())
            .collect();
        if let Some(threshold) = threshold {
            for pair in recorded.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let gap_hours = (b - a) as f64 * stats.step_hours;
                if gap_hours <= threshold {
                    let carry = grid.interventions[a][ch];
                    for t in a + 1..b {
                        grid.interventions[t][ch] = carry;
                    }
                }
            }
        }
        for t in 0..grid.t_max {
            if grid.interventions[t][ch].is_none() {
                grid.interventions[t][ch] = Some(0.0);
            }
        }
    }
}

/// Full per-cohort preprocessing output.
#[derive(Debug)]
pub struct PreprocessOutput {
    pub stats: PreprocessStats,
    pub train: Vec<Trajectory>,
    pub eval: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub warnings: Vec<String>,
}

/// Runs the whole pipeline: harmonize, stats on the training split, outlier
/// removal, z-scoring, discretization, imputation, tensorization, and the
/// train/eval/test split by patient-id hash.
pub fn preprocess_cohort(
    raw: Vec<RawEvent>,
    events: &[EventRow],
    map: &HarmonizationMap,
    step_hours: f64,
    strict: bool,
) -> Result<PreprocessOutput, DataError> {
    let (harmonized, dropped) = harmonize(raw, map, strict)?;
    let mut warnings = Vec::new();
    if dropped > 0 {
        warnings.push(format!("harmonization dropped {dropped} rows with unmapped codes"));
    }

    let (stats, stat_warnings) = compute_stats(&harmonized, step_hours)?;
    warnings.extend(stat_warnings);

    let cleaned = remove_outliers(harmonized, &stats);
    let scored = zscore(cleaned, &stats);

    let catalog: BTreeSet<String> = events.iter().map(|e| e.event.clone()).collect();

    let mut per_patient: BTreeMap<String, Vec<RawEvent>> = BTreeMap::new();
    for event in scored {
        per_patient.entry(event.patient_id.clone()).or_default().push(event);
    }
    let mut events_by_patient: BTreeMap<String, Vec<&EventRow>> = BTreeMap::new();
    for row in events {
        events_by_patient.entry(row.patient_id.clone()).or_default().push(row);
    }

    let mut out = PreprocessOutput {
        stats,
        train: Vec::new(),
        eval: Vec::new(),
        test: Vec::new(),
        warnings,
    };

    for (patient_id, stream) in &per_patient {
        let Some(event_rows) = events_by_patient.get(patient_id) else {
            out.warnings
                .push(format!("patient `{patient_id}`: raw records but no events; skipped"));
            continue;
        };
        let seen: BTreeSet<String> = event_rows.iter().map(|e| e.event.clone()).collect();
        let missing: Vec<String> = catalog.difference(&seen).cloned().collect();
        if !missing.is_empty() {
            return Err(DataError::MissingEvents {
                patient_id: patient_id.clone(),
                missing,
            });
        }

        let last_raw = stream
            .iter()
            .map(|e| e.time_hours)
            .fold(0.0f64, f64::max);
        let last_event = event_rows
            .iter()
            .map(|e| e.time_hours)
            .fold(0.0f64, f64::max);
        let end_hours = last_raw.max(last_event);

        let mut grid = discretize(stream, &out.stats, end_hours)?;
        let mask: Vec<Vec<f64>> = grid
            .obs
            .iter()
            .map(|row| row.iter().map(|c| if c.is_some() { 1.0 } else { 0.0 }).collect())
            .collect();
        impute_observations(&mut grid);
        impute_interventions(&mut grid, &out.stats);

        let mut event_map = BTreeMap::new();
        for row in event_rows {
            if row.time_hours < 0.0 {
                return Err(DataError::NegativeTime {
                    patient_id: patient_id.clone(),
                    time_hours: row.time_hours,
                });
            }
            let t = step_of(row.time_hours, step_hours).min(grid.t_max);
            let record = if row.censored != 0 {
                EventRecord::censored(t)
            } else {
                EventRecord::observed(t)
            };
            event_map.insert(row.event.clone(), record);
        }

        let trajectory = Trajectory {
            patient_id: patient_id.clone(),
            t_max: grid.t_max,
            x: grid
                .obs
                .iter()
                .map(|row| row.iter().map(|c| c.unwrap_or(0.0)).collect())
                .collect(),
            u: grid
                .interventions
                .iter()
                .map(|row| row.iter().map(|c| c.unwrap_or(0.0)).collect())
                .collect(),
            mask,
            events: event_map,
        };
        trajectory.validate(out.stats.obs_channels.len(), out.stats.intervention_channels.len())?;

        match super::split_for(patient_id) {
            Split::Train => out.train.push(trajectory),
            Split::Eval => out.eval.push(trajectory),
            Split::Test => out.test.push(trajectory),
        }
    }

    if out.train.is_empty() && out.eval.is_empty() && out.test.is_empty() {
        return Err(DataError::EmptyCohort);
    }
    Ok(out)
}
