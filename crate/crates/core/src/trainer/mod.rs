//! RMSProp training over equal-length batches, evaluation and explanation.

mod explain;
pub mod metrics;
mod optim;

pub use explain::{explain, Explanation, RankedCode, RankedIndicator, VisitExplanation};
pub use optim::{rmsprop_step, OptimizerState, RmsPropConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AblationConfig;
use crate::data::{group_by_visits, split_records, Batch, DatasetConfig, PatientRecord, TimeUnit};
use crate::features::{Normalizer, PreparedRecord};
use crate::params::ModelConfig;
use crate::sequence::{Model, SplitSpec};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Equal-length groups are cut into chunks of at most this many records.
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
    /// Abort when an epoch's mean loss exceeds this multiple of the initial
    /// loss.
    pub divergence_factor: f64,
    /// Stop after this many epochs without a new best training loss.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: RmsPropConfig::default(),
            divergence_factor: 10.0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence_factor must exceed 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Mean training loss after each epoch; entry 0 is the loss before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().expect("curve has the initial point")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (e, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{e},{l}\n"));
        }
        out
    }
}

/// Standardizes and converts every batch member.
pub fn prepare_batches(batches: &[Batch], normalizer: &Normalizer, unit: TimeUnit) -> Vec<Vec<PreparedRecord>> {
    batches
        .iter()
        .map(|b| b.records.iter().map(|r| normalizer.prepare(r, unit)).collect())
        .collect()
}

fn mean_loss(model: &Model, groups: &[Vec<PreparedRecord>]) -> Result<f64> {
    let losses: Vec<f64> = groups
        .iter()
        .flatten()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| model.loss(r))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Fits `model` in place.
///
/// Each epoch shuffles records within their visit-count group, cuts groups
/// into chunks of at most `batch_size`, and visits chunks in a shuffled order.
/// One RMSProp step is taken per chunk with the mean gradient. The epoch loss
/// is the mean of the per-record losses seen during the epoch, summed in a
/// fixed record order.
pub fn train(
    model: &mut Model,
    groups: &[Vec<PreparedRecord>],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    seed: u64,
) -> Result<LossCurve> {
    cfg.validate()?;
    let n_records: usize = groups.iter().map(Vec::len).sum();
    if n_records == 0 {
        return Err(Error::Config("no training records".into()));
    }
    let initial = mean_loss(model, groups)?;
    let limit = cfg.divergence_factor * initial;
    let mut losses = vec![initial];
    let offsets: Vec<usize> = groups
        .iter()
        .scan(0, |acc, g| {
            let start = *acc;
            *acc += g.len();
            Some(start)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = initial;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let mut chunks: Vec<Vec<(usize, &PreparedRecord)>> = Vec::new();
        for (g, &off) in groups.iter().zip(&offsets) {
            let mut idx: Vec<usize> = (0..g.len()).collect();
            idx.shuffle(&mut rng);
            for c in idx.chunks(cfg.batch_size) {
                chunks.push(c.iter().map(|&i| (off + i, &g[i])).collect());
            }
        }
        chunks.shuffle(&mut rng);

        let mut per_record = vec![0.0; n_records];
        for chunk in &chunks {
            let results: Vec<(f64, Vec<Vec<f64>>)> = chunk
                .par_iter()
                .map(|(_, r)| model.loss_and_grads(r))
                .collect::<Result<_>>()?;
            let inv = 1.0 / chunk.len() as f64;
            let mut grad: Vec<Vec<f64>> = results[0].1.iter().map(|g| vec![0.0; g.len()]).collect();
            for ((slot, _), (l, g)) in chunk.iter().zip(&results) {
                per_record[*slot] = *l;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    for (a, &x) in acc.iter_mut().zip(gi) {
                        *a += x;
                    }
                }
            }
            grad.iter_mut().flatten().for_each(|a| *a *= inv);
            rmsprop_step(&mut model.params, &grad, state)?;
        }

        let loss = per_record.iter().sum::<f64>() / n_records as f64;
        losses.push(loss);
        if !loss.is_finite() || loss > limit {
            return Err(Error::Divergence { epoch, loss, limit });
        }
        if let Some(patience) = cfg.patience {
            if loss < best {
                best = loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(LossCurve { losses })
}

/// A model trained on one side of a split, with the held-out side prepared
/// for evaluation.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: Model,
    pub normalizer: Normalizer,
    pub curve: LossCurve,
    /// Held-out records in split order.
    pub test: Vec<PreparedRecord>,
}

/// Splits `records`, fits the normalizer on the training side, initializes
/// a model from `seed` and trains it with the same seed.
pub fn fit_split(
    records: &[PatientRecord],
    dataset: &DatasetConfig,
    model_cfg: ModelConfig,
    ablation: AblationConfig,
    train_cfg: &TrainConfig,
    split: SplitSpec,
    seed: u64,
) -> Result<Fitted> {
    let (train_recs, test_recs) = split_records(records, split.ratio, split.seed)?;
    let normalizer = Normalizer::fit(&train_recs, dataset.n_indicators());
    let groups = prepare_batches(&group_by_visits(train_recs), &normalizer, dataset.time_unit);
    let mut model = Model::new(model_cfg, ablation, seed)?;
    let mut state = OptimizerState::new(&model.params, train_cfg.optimizer);
    let curve = train(&mut model, &groups, train_cfg, &mut state, seed)?;
    let test = test_recs
        .iter()
        .map(|r| normalizer.prepare(r, dataset.time_unit))
        .collect();
    Ok(Fitted {
        model,
        normalizer,
        curve,
        test,
    })
}

/// Metrics on a held-out set; AUCs are `None` when a class is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_records: usize,
    pub accuracy: f64,
    pub auc_roc: Option<f64>,
    pub auc_pr: Option<f64>,
    /// Records per true class.
    pub class_counts: Vec<usize>,
    pub mean_loss: f64,
    pub model: ModelConfig,
    pub ablation: AblationConfig,
    pub seed: u64,
}

/// Per-record probabilities, in input order.
pub fn predict_all(model: &Model, records: &[PreparedRecord]) -> Result<Vec<Vec<f64>>> {
    records
        .par_iter()
        .map(|r| model.predict(r).map(|p| p.probs))
        .collect()
}

pub fn evaluate(model: &Model, records: &[PreparedRecord], seed: u64) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let k = model.config.n_classes;
    let preds: Vec<(Vec<f64>, f64)> = records
        .par_iter()
        .map(|r| model.predict(r).map(|p| (p.probs, p.loss)))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let probs: Vec<Vec<f64>> = preds.iter().map(|(p, _)| p.clone()).collect();
    let mut class_counts = vec![0; k];
    for &y in &labels {
        class_counts[y] += 1;
    }
    Ok(EvalReport {
        n_records: records.len(),
        accuracy: metrics::accuracy(&probs, &labels),
        auc_roc: metrics::multiclass_auc_roc(&probs, &labels, k),
        auc_pr: metrics::multiclass_auc_pr(&probs, &labels, k),
        class_counts,
        mean_loss: preds.iter().map(|(_, l)| l).sum::<f64>() / records.len() as f64,
        model: model.config.clone(),
        ablation: model.ablation,
        seed,
    })
}
