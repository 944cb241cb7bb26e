//! Censoring-aware evaluation: concordance index, fixed-window AUC-ROC and
//! average precision with the three-way labeling rule, and hazard-trajectory
//! correlation.

use thiserror::Error;

use crate::data::EventRecord;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("need at least one positive and one negative (got {n_pos} / {n_neg})")]
    DegenerateLabels { n_pos: usize, n_neg: usize },
    #[error("trajectories have different lengths ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least 2 points, got {0}")]
    TooShort(usize),
    #[error("trajectory has zero variance")]
    ZeroVariance,
}

/// One subject scored for ranking metrics: higher risk means the event is
/// expected earlier.
#[derive(Clone, Debug)]
pub struct ScoredSubject {
    pub patient_id: String,
    pub risk: f64,
    /// Event or censor step, relative grid (>= 1).
    pub event_time: usize,
    pub censored: bool,
}

/// Harrell-style concordance index. A pair `(i, j)` is comparable when
/// `t_i < t_j` and subject `i`'s event was observed; it is concordant when
/// `risk_i > risk_j`, and tied risks count one half.
pub fn c_index(subjects: &[ScoredSubject]) -> Result<f64, MetricError> {
    let mut comparable = 0u64;
    let mut concordant_mass = 0.0f64;
    for i in subjects {
        if i.censored {
            continue;
        }
        for j in subjects {
            if j.event_time <= i.event_time {
                continue;
            }
            comparable += 1;
            if i.risk > j.risk {
                concordant_mass += 1.0;
            } else if i.risk == j.risk {
                concordant_mass += 0.5;
            }
        }
    }
    if comparable == 0 {
        return Err(MetricError::NoComparablePairs);
    }
    Ok(concordant_mass / comparable as f64)
}

/// Fixed-window label for a relative event record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowLabel {
    /// Observed within the window.
    Positive,
    /// Observed or censored beyond the window: the event provably did not
    /// occur inside it.
    Negative,
    /// Censored within the window: outcome unknowable, dropped from the
    /// computation.
    Excluded,
}

pub fn window_label(record: &EventRecord, window: usize) -> WindowLabel {
    if record.t > window {
        WindowLabel::Negative
    } else if record.is_censored() {
        WindowLabel::Excluded
    } else {
        WindowLabel::Positive
    }
}

fn split_counts(scored: &[(f64, bool)]) -> (usize, usize) {
    let n_pos = scored.iter().filter(|(_, label)| *label).count();
    (n_pos, scored.len() - n_pos)
}

/// AUC-ROC via the rank statistic with midranks for tied scores.
pub fn auc_roc(scored: &[(f64, bool)]) -> Result<f64, MetricError> {
    let (n_pos, n_neg) = split_counts(scored);
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::DegenerateLabels { n_pos, n_neg });
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scored[order[j]].0 == scored[order[i]].0 {
            j += 1;
        }
        // Ranks are 1-based; tied scores share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if scored[idx].1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Average precision: precision-weighted recall increments over descending
/// scores, with tied scores processed as one group.
pub fn average_precision(scored: &[(f64, bool)]) -> Result<f64, MetricError> {
    let (n_pos, n_neg) = split_counts(scored);
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::DegenerateLabels { n_pos, n_neg });
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));

    let mut ap = 0.0f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_tp = 0usize;
        let mut group_fp = 0usize;
        while j < order.len() && scored[order[j]].0 == scored[order[i]].0 {
            if scored[order[j]].1 {
                group_tp += 1;
            } else {
                group_fp += 1;
            }
            j += 1;
        }
        tp += group_tp;
        fp += group_fp;
        if group_tp > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            let recall_increment = group_tp as f64 / n_pos as f64;
            ap += precision * recall_increment;
        }
        i = j;
    }
    Ok(ap)
}

/// Pearson correlation at lag 0 between two equal-length hazard
/// trajectories.
pub fn trajectory_correlation(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(MetricError::TooShort(a.len()));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a).powi(2);
        var_b += (y - mean_b).powi(2);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}
