use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use tghoa::attention::{Ablation, Decay};
use tghoa::data::{generate_synthetic, load_jsonl, split_records, write_jsonl, DatasetConfig, PatientRecord};
use tghoa::sequence::{Checkpoint, SplitSpec};
use tghoa::trainer::{evaluate, explain, fit_split};

use crate::config::{Overrides, RunConfig};
use crate::CliError;

/// Time-guided high-order attention over irregular multimodal visit
/// sequences.
///
/// Exit codes: 0 ok, 2 usage, 3 io, 4 schema, 5 divergence. Errors are
/// printed to stderr as one JSON line.
#[derive(Debug, Parser)]
#[command(name = "tghoa", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort as JSON lines
    Gen(GenArgs),
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on its held-out split
    Eval(EvalArgs),
    /// Train and evaluate every (ablation, decay, seed) cell
    Sweep(SweepArgs),
    /// Export per-visit attention rankings for one patient
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Run configuration (JSON); the dataset and synth sections are used
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override synth.n_patients
    #[arg(long)]
    pub n_patients: Option<usize>,
    /// Output JSONL path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Input records (JSONL)
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialization and batch order; also the split seed unless
    /// --split-seed is given
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the train/test split
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Model variant: lstm, lstm-att, lstm-tga, lstm-coa, tgcoa or tghoa
    #[arg(long, default_value = "tghoa")]
    pub ablation: Ablation,
    /// Decay function: g1, g2, g3 or g4
    #[arg(long, default_value = "g2")]
    pub decay: Decay,
    /// Checkpoint output path
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve output path (CSV: epoch,mean_loss)
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Input records (JSONL), the same file the model was trained on
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint written by `train`
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluate on every record instead of the held-out split
    #[arg(long)]
    pub all: bool,
    /// Report output path (JSON)
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Input records (JSONL)
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Seed of the train/test split shared by all cells; defaults to each
    /// cell's seed
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Comma-separated model variants (default: all six)
    #[arg(long, value_delimiter = ',')]
    pub ablations: Vec<Ablation>,
    /// Comma-separated decay functions (default: all four)
    #[arg(long, value_delimiter = ',')]
    pub decays: Vec<Decay>,
    /// Table output path (CSV)
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Input records (JSONL)
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint written by `train`
    #[arg(long)]
    pub model: PathBuf,
    /// Patient identifier
    #[arg(long)]
    pub patient: String,
    /// Trace output path (JSON)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Explain(a) => explain_cmd(a),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::schema(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn load_records(path: &Path, ds: &DatasetConfig) -> Result<Vec<PatientRecord>, CliError> {
    ds.validate().map_err(tghoa::Error::from)?;
    Ok(load_jsonl(path, ds).map_err(tghoa::Error::from)?)
}

fn gen(a: GenArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(n) = a.n_patients {
        cfg.synth.n_patients = n;
    }
    cfg.dataset.validate().map_err(tghoa::Error::from)?;
    let records = generate_synthetic(&cfg.dataset, &cfg.synth, a.seed).map_err(tghoa::Error::from)?;
    let mut buf = Vec::new();
    write_jsonl(&records, &mut buf).map_err(|e| CliError::io(&a.out, e))?;
    write_file(&a.out, &buf)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    let records = load_records(&a.data, &cfg.dataset)?;
    let split = SplitSpec {
        ratio: cfg.split_ratio,
        seed: a.split_seed.unwrap_or(a.seed),
    };
    let fitted = fit_split(
        &records,
        &cfg.dataset,
        cfg.model_config(),
        a.ablation.config(a.decay),
        &cfg.training,
        split,
        a.seed,
    )?;
    let ck = Checkpoint::new(&fitted.model, cfg.dataset.clone(), fitted.normalizer, Some(split), a.seed);
    write_file(&a.out, ck.to_json()?.as_bytes())?;
    if let Some(curve) = &a.curve {
        write_file(curve, fitted.curve.to_csv().as_bytes())?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.model)?;
    let model = ck.to_model()?;
    let records = load_records(&a.data, &ck.dataset)?;
    let chosen = match (ck.split, a.all) {
        (Some(s), false) => split_records(&records, s.ratio, s.seed).map_err(tghoa::Error::from)?.1,
        _ => records,
    };
    let prepared: Vec<_> = chosen
        .iter()
        .map(|r| ck.normalizer.prepare(r, ck.dataset.time_unit))
        .collect();
    let report = evaluate(&model, &prepared, ck.seed)?;
    write_json(&a.report, &report)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    ablation: String,
    decay: String,
    seed: u64,
    accuracy: f64,
    auc_roc: Option<f64>,
    auc_pr: Option<f64>,
    final_loss: f64,
    epochs: usize,
}

fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    if a.seeds.is_empty() {
        return Err(CliError::usage("--seeds must list at least one seed"));
    }
    let records = load_records(&a.data, &cfg.dataset)?;
    let ablations = if a.ablations.is_empty() { Ablation::ALL.to_vec() } else { a.ablations.clone() };
    let decays = if a.decays.is_empty() { Decay::ALL.to_vec() } else { a.decays.clone() };
    let mut cells = Vec::new();
    for &ab in &ablations {
        for &d in &decays {
            for &s in &a.seeds {
                cells.push((ab, d, s));
            }
        }
    }
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(ab, d, seed)| -> Result<SweepRow, CliError> {
            let split = SplitSpec {
                ratio: cfg.split_ratio,
                seed: a.split_seed.unwrap_or(seed),
            };
            let fitted = fit_split(
                &records,
                &cfg.dataset,
                cfg.model_config(),
                ab.config(d),
                &cfg.training,
                split,
                seed,
            )?;
            let report = evaluate(&fitted.model, &fitted.test, seed)?;
            Ok(SweepRow {
                ablation: ab.to_string(),
                decay: d.to_string(),
                seed,
                accuracy: report.accuracy,
                auc_roc: report.auc_roc,
                auc_pr: report.auc_pr,
                final_loss: fitted.curve.last(),
                epochs: fitted.curve.losses.len() - 1,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).map_err(|e| CliError::schema(e.to_string()))?;
    }
    let buf = w.into_inner().map_err(|e| CliError::schema(e.to_string()))?;
    write_file(&a.out, &buf)
}

fn explain_cmd(a: ExplainArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.model)?;
    let model = ck.to_model()?;
    let records = load_records(&a.data, &ck.dataset)?;
    let record = records
        .iter()
        .find(|r| r.patient_id == a.patient)
        .ok_or_else(|| CliError::usage(format!("patient `{}` not found in {}", a.patient, a.data.display())))?;
    let prepared = ck.normalizer.prepare(record, ck.dataset.time_unit);
    let ex = explain(&model, &prepared, &ck.dataset.indicators)?;
    write_json(&a.out, &ex)
}
