//! Subcommand definitions and dispatch.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dssm_core::data::{self, DataError, HarmonizationMap};
use dssm_core::synthcohort::{self, GroundTruth, SimError};
use dssm_core::trainer::{self, EvaluateOptions, TrainConfig, TrainError};

/// Top-level error classes, matched to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Data(msg) | CliError::Numerical(msg) => {
                write!(f, "{msg}")
            }
        }
    }
}

impl From<DataError> for CliError {
    fn from(err: DataError) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(err: SimError) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(err: TrainError) -> Self {
        match &err {
            TrainError::BadConfig(_) => CliError::Usage(err.to_string()),
            TrainError::Data(_)
            | TrainError::EmptyCohort
            | TrainError::CheckpointIo { .. }
            | TrainError::CheckpointFormat { .. }
            | TrainError::SchemaMismatch { .. } => CliError::Data(err.to_string()),
            TrainError::NonFiniteLoss { .. }
            | TrainError::Inference(_)
            | TrainError::Ssm(_)
            | TrainError::Survival(_)
            | TrainError::Diff(_) => CliError::Numerical(err.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dssm",
    about = "Deep state-space time-to-event modeling",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with known dynamics and oracle hazards.
    Simulate(SimulateArgs),
    /// Preprocess raw irregular records into a tensorized cohort.
    Preprocess(PreprocessArgs),
    /// Train the model on a tensorized cohort.
    Train(TrainArgs),
    /// Encode histories and roll out per-event hazard trajectories.
    Predict(PredictArgs),
    /// Score predictions against an events file.
    Evaluate(EvaluateArgs),
    /// Flatten predictions into a plot-ready CSV.
    ExportTrajectories(ExportArgs),
}

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    /// Number of patients to simulate.
    #[arg(long)]
    pub patients: usize,
    /// Administrative horizon in steps.
    #[arg(long, default_value_t = 40)]
    pub tmax: usize,
    /// Probability of early censoring at a uniform random step.
    #[arg(long, default_value_t = 0.3)]
    pub censor_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (cohort.jsonl, events.csv, oracle.jsonl).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct PreprocessArgs {
    /// Raw records CSV: patient_id,time_hours,channel_kind,channel_name,value.
    #[arg(long)]
    pub raw: PathBuf,
    /// Events CSV: patient_id,event,time_hours,censored.
    #[arg(long)]
    pub events: PathBuf,
    /// Harmonization map CSV: source_code,canonical_name,unit_scale.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Where to write the training-split statistics JSON.
    #[arg(long)]
    pub stats_out: PathBuf,
    /// Output directory (cohort.train/eval/test.jsonl).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12.0)]
    pub step_hours: f64,
    /// Error on channel codes missing from the map instead of dropping them.
    #[arg(long, default_value_t = false)]
    pub strict: bool,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    /// Tensorized training cohort (JSONL).
    #[arg(long)]
    pub cohort: PathBuf,
    /// Optional held-out cohort scored after each epoch.
    #[arg(long)]
    pub eval_cohort: Option<PathBuf>,
    /// TOML config file; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (checkpoint.dssm, loss_log.csv).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub recurrent_hidden: Option<usize>,
    #[arg(long)]
    pub mlp_units: Option<usize>,
    #[arg(long)]
    pub mlp_layers: Option<usize>,
    /// Use single affine layers for the generative nets and hazard heads.
    #[arg(long)]
    pub linear_model: Option<bool>,
    #[arg(long)]
    pub w_rec: Option<f64>,
    /// 1 = full objective, 0 = no-regularization ablation.
    #[arg(long)]
    pub kl_weight: Option<f64>,
    /// Global-norm gradient clip (e.g. 10).
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub step_hours: Option<f64>,
    #[arg(long)]
    pub rollout_horizon: Option<usize>,
}

#[derive(Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Prediction time in hours from the start of each record.
    #[arg(long)]
    pub tstar_hours: f64,
    /// Roll-out horizon in steps.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for encoding; 1 by default for reproducibility.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Output directory (predictions.jsonl).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub events: PathBuf,
    /// Fixed prediction windows in hours.
    #[arg(long, value_delimiter = ',', default_values_t = [24.0, 48.0])]
    pub windows: Vec<f64>,
    /// Score the C-index on this window instead of the full horizon.
    #[arg(long)]
    pub cindex_window: Option<f64>,
    /// Output directory (metrics.csv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Output directory (trajectories.csv).
    #[arg(long)]
    pub out: PathBuf,
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_resolved_config<T: Serialize>(dir: &Path, subcommand: &str, args: &T) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Snapshot<'a, T: Serialize> {
        subcommand: &'a str,
        #[serde(flatten)]
        args: &'a T,
    }
    let text = toml::to_string_pretty(&Snapshot { subcommand, args })
        .map_err(|e| CliError::Data(format!("cannot serialize config snapshot: {e}")))?;
    std::fs::write(dir.join("resolved_config.toml"), text)
        .map_err(|e| CliError::Data(format!("cannot write config snapshot: {e}")))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Preprocess(args) => preprocess(args),
        Command::Train(args) => train(args),
        Command::Predict(args) => predict(args),
        Command::Evaluate(args) => evaluate(args),
        Command::ExportTrajectories(args) => export(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    if args.patients == 0 {
        return Err(CliError::Usage("--patients must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&args.censor_prob) {
        return Err(CliError::Usage("--censor-prob must be in [0, 1]".into()));
    }
    ensure_out_dir(&args.out)?;
    let mut gt = GroundTruth::demo(args.tmax);
    gt.early_censor_prob = args.censor_prob;
    let cohort = synthcohort::simulate_cohort(&gt, args.patients, args.seed)?;
    synthcohort::write_cohort(&args.out, &cohort)?;
    write_resolved_config(&args.out, "simulate", &args)?;
    println!(
        "simulated {} patients ({} events each) into {}",
        args.patients,
        gt.events.len(),
        args.out.display()
    );
    Ok(())
}

fn preprocess(args: PreprocessArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    let raw = data::read_raw_csv(&args.raw)?;
    let events = data::read_events_csv(&args.events)?;
    let map = match &args.map {
        Some(path) => data::read_harmonization_csv(path)?,
        None => HarmonizationMap::default(),
    };
    let output = data::preprocess_cohort(raw, &events, &map, args.step_hours, args.strict)?;
    for warning in &output.warnings {
        eprintln!("warning: {warning}");
    }
    data::write_stats(&args.stats_out, &output.stats)?;
    data::write_cohort_jsonl(&args.out.join("cohort.train.jsonl"), &output.train)?;
    data::write_cohort_jsonl(&args.out.join("cohort.eval.jsonl"), &output.eval)?;
    data::write_cohort_jsonl(&args.out.join("cohort.test.jsonl"), &output.test)?;
    write_resolved_config(&args.out, "preprocess", &args)?;
    println!(
        "preprocessed {} train / {} eval / {} test patients into {}",
        output.train.len(),
        output.eval.len(),
        output.test.len(),
        args.out.display()
    );
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident),*) => {
            $(if let Some(value) = args.$field { config.$field = value; })*
        };
    }
    apply!(
        epochs,
        learning_rate,
        batch_size,
        latent_dim,
        recurrent_hidden,
        mlp_units,
        mlp_layers,
        linear_model,
        w_rec,
        kl_weight,
        seed,
        step_hours,
        rollout_horizon
    );
    if args.grad_clip.is_some() {
        config.grad_clip = args.grad_clip;
    }
    config.validate()?;
    Ok(config)
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    let config = resolve_train_config(&args)?;
    let cohort = data::read_cohort_jsonl(&args.cohort)?;
    let eval_cohort = match &args.eval_cohort {
        Some(path) => Some(data::read_cohort_jsonl(path)?),
        None => None,
    };
    let outcome = trainer::train(&config, &cohort, eval_cohort.as_deref())?;
    trainer::save_checkpoint(
        &args.out.join("checkpoint.dssm"),
        &outcome.model,
        &outcome.adam,
        &config,
        outcome.epochs_run,
    )?;
    trainer::write_loss_log(&args.out.join("loss_log.csv"), &outcome.log)?;
    let snapshot = toml::to_string_pretty(&config)
        .map_err(|e| CliError::Data(format!("cannot serialize config: {e}")))?;
    std::fs::write(args.out.join("resolved_config.toml"), snapshot)
        .map_err(|e| CliError::Data(format!("cannot write config snapshot: {e}")))?;
    if let Some(row) = outcome.log.iter().rev().find(|r| r.split == "train") {
        println!(
            "trained {} epochs; final train objective {:.4} (event {:.4}, kl {:.4})",
            outcome.epochs_run, row.total, row.event_loglik, row.kl
        );
    } else {
        println!("trained {} epochs", outcome.epochs_run);
    }
    Ok(())
}

fn predict(args: PredictArgs) -> Result<(), CliError> {
    if args.threads == 0 {
        return Err(CliError::Usage("--threads must be >= 1".into()));
    }
    ensure_out_dir(&args.out)?;
    let loaded = trainer::load_checkpoint(&args.checkpoint)?;
    let cohort = data::read_cohort_jsonl(&args.cohort)?;
    let horizon = args.horizon.unwrap_or(loaded.config.rollout_horizon);
    let predictions = trainer::predict(
        &loaded.model,
        &cohort,
        args.tstar_hours,
        horizon,
        args.seed,
        args.threads,
    )?;
    trainer::write_predictions(&args.out.join("predictions.jsonl"), &predictions)?;
    write_resolved_config(&args.out, "predict", &args)?;
    println!(
        "predicted {} patients ({} skipped with records shorter than t*) into {}",
        predictions.records.len(),
        predictions.skipped.len(),
        args.out.display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    let predictions = trainer::read_predictions(&args.predictions)?;
    let events = data::read_events_csv(&args.events)?;
    let options = EvaluateOptions {
        c_index_window_hours: args.cindex_window,
    };
    let report = trainer::evaluate(&predictions, &events, &args.windows, &options)?;
    trainer::write_metrics_csv(&args.out.join("metrics.csv"), &report)?;
    write_resolved_config(&args.out, "evaluate", &args)?;
    for row in &report.rows {
        let value = row
            .value
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| format!("absent ({})", row.note.as_deref().unwrap_or("n/a")));
        let window = row
            .window_hours
            .map(|w| format!("@{w}h"))
            .unwrap_or_default();
        println!("{}{} {}: {}", row.metric, window, row.event, value);
    }
    Ok(())
}

fn export(args: ExportArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    let predictions = trainer::read_predictions(&args.predictions)?;
    trainer::export_trajectories(&args.out.join("trajectories.csv"), &predictions)?;
    write_resolved_config(&args.out, "export-trajectories", &args)?;
    println!(
        "exported {} patients into {}",
        predictions.records.len(),
        args.out.display()
    );
    Ok(())
}
