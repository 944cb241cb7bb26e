//! Scratch harness for tuning the synthetic-recovery setup.

use std::collections::BTreeMap;
use std::time::Instant;

use dssm_core::data::EventRow;
use dssm_core::metrics::trajectory_correlation;
use dssm_core::synthcohort::{simulate_cohort, GroundTruth, OracleRecord, SimulatedCohort};
use dssm_core::trainer::{
    evaluate, predict, train, EvaluateOptions, PatientPrediction, Predictions, PredictionsHeader,
    TrainConfig,
};

fn oracle_predictions(
    sim: &SimulatedCohort,
    header: &PredictionsHeader,
) -> Predictions {
    let t_star = header.t_star_step;
    let horizon = header.horizon;
    let mut by_patient: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let lookup: BTreeMap<(String, String), &OracleRecord> = sim
        .oracle
        .iter()
        .map(|r| ((r.patient_id.clone(), r.event.clone()), r))
        .collect();
    for trajectory in &sim.trajectories {
        if trajectory.t_max < t_star {
            continue;
        }
        let mut events = BTreeMap::new();
        for event in trajectory.events.keys() {
            let record = lookup[&(trajectory.patient_id.clone(), event.clone())];
            let hazards: Vec<f64> = (1..=horizon)
                .map(|tau| {
                    let t = t_star + tau;
                    let idx = t.min(record.lambda.len());
                    record.lambda[idx - 1]
                })
                .collect();
            events.insert(event.clone(), hazards);
        }
        by_patient.insert(trajectory.patient_id.clone(), events);
    }
    Predictions {
        header: header.clone(),
        records: by_patient
            .into_iter()
            .map(|(patient_id, hazards)| PatientPrediction {
                patient_id,
                hazards,
            })
            .collect(),
        skipped: vec![],
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let hidden: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(12);

    let gt = GroundTruth::demo(40);
    let train_sim = simulate_cohort(&gt, 2000, 1000).unwrap();
    let test_sim = simulate_cohort(&gt, 500, 2000).unwrap();
    let observed: usize = train_sim
        .trajectories
        .iter()
        .flat_map(|t| t.events.values())
        .filter(|r| !r.is_censored())
        .count();
    println!(
        "train cohort: {} patients, {} observed events / {} records",
        train_sim.trajectories.len(),
        observed,
        3 * train_sim.trajectories.len()
    );

    let config = TrainConfig {
        learning_rate: lr,
        batch_size: 50,
        epochs,
        latent_dim: 2,
        recurrent_hidden: hidden,
        mlp_units: 8,
        mlp_layers: 1,
        linear_model: true,
        w_rec: 1.0,
        kl_weight: 1.0,
        grad_clip: None,
        seed: 11,
        step_hours: 12.0,
        rollout_horizon: 36,
    };
    let start = Instant::now();
    let outcome = train(&config, &train_sim.trajectories, None).unwrap();
    println!("training {} epochs took {:.1?}", epochs, start.elapsed());
    if let Some(row) = outcome.log.first() {
        println!("epoch 0: total {:.3} event {:.3}", row.total, row.event_loglik);
    }
    if let Some(row) = outcome.log.last() {
        println!("last:    total {:.3} event {:.3}", row.total, row.event_loglik);
    }

    let start = Instant::now();
    let predictions = predict(&outcome.model, &test_sim.trajectories, 48.0, 36, 5, 1).unwrap();
    println!("predict took {:.1?}", start.elapsed());

    let oracle = oracle_predictions(&test_sim, &predictions.header);

    let event_rows: Vec<EventRow> = test_sim.event_rows.clone();
    let options = EvaluateOptions::default();
    let model_report = evaluate(&predictions, &event_rows, &[24.0], &options).unwrap();
    let oracle_report = evaluate(&oracle, &event_rows, &[24.0], &options).unwrap();

    for event in ["event_a", "event_b", "event_c"] {
        let mc = model_report.find("c_index", event, None).unwrap();
        let oc = oracle_report.find("c_index", event, None).unwrap();
        let ma = model_report.find("auc_roc", event, Some(24.0)).unwrap();
        let oa = oracle_report.find("auc_roc", event, Some(24.0)).unwrap();
        println!(
            "{event}: c-index model {:.4} oracle {:.4} (ratio {:.3}) | auc@24 model {:?} oracle {:?} (n_pos {})",
            mc.value.unwrap_or(f64::NAN),
            oc.value.unwrap_or(f64::NAN),
            mc.value.unwrap_or(f64::NAN) / oc.value.unwrap_or(f64::NAN),
            ma.value,
            oa.value,
            ma.n_pos,
        );
    }

    let corrs: Vec<f64> = predictions
        .records
        .iter()
        .filter_map(|r| trajectory_correlation(&r.hazards["event_b"], &r.hazards["event_c"]).ok())
        .collect();
    let mean_corr = corrs.iter().sum::<f64>() / corrs.len() as f64;
    let min_corr = corrs.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "shared-head correlation: mean {:.4}, min {:.4} over {} patients",
        mean_corr,
        min_corr,
        corrs.len()
    );

    // Ablation probe: kl_weight 1 vs 0, a few seeds, test event-loglik.
    let ablation_epochs: usize = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    if ablation_epochs > 0 {
        use dssm_core::inference::ElboWeights;
        use dssm_core::trainer::evaluate_objective;
        let eval_weights = ElboWeights { w_rec: 0.0, kl_weight: 0.0 };
        for kl in [1.0, 0.0] {
            let mut logliks = Vec::new();
            for seed in [101u64, 102, 103] {
                let cfg = TrainConfig {
                    epochs: ablation_epochs,
                    kl_weight: kl,
                    seed,
                    ..config.clone()
                };
                let start = Instant::now();
                let out = train(&cfg, &train_sim.trajectories, None).unwrap();
                let values =
                    evaluate_objective(&out.model, &test_sim.trajectories, &eval_weights, 999, 0)
                        .unwrap();
                println!(
                    "  kl={kl} seed={seed}: test event-loglik {:.4} ({:.0?})",
                    values.event_loglik,
                    start.elapsed()
                );
                logliks.push(values.event_loglik);
            }
            let mean = logliks.iter().sum::<f64>() / logliks.len() as f64;
            let var = logliks.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (logliks.len() - 1) as f64;
            println!("kl={kl}: mean {:.4} se {:.4}", mean, (var / 3.0).sqrt());
        }
    }
}
