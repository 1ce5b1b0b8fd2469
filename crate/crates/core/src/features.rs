//! Per-visit feature extraction: diagnosis embeddings `U^t` and lab
//! indicator features `V^t`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::{PatientRecord, TimeUnit};
use crate::params::{param_group, ModelConfig};

param_group! {
    /// One indicator's two-block 1-D CNN.
    CnnParams {
        /// `[c1, 1, k1]`
        conv1_w,
        conv1_b,
        /// `[d_v, c1, k2]`
        conv2_w,
        conv2_b,
    }
}

/// Embedding matrix plus one independent CNN per indicator.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureParams<T = Tensor> {
    /// `[d_u, |D|]`
    pub theta_e: T,
    pub cnn: Vec<CnnParams<T>>,
}

impl<T> FeatureParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FeatureParams<U> {
        FeatureParams {
            theta_e: f(&self.theta_e),
            cnn: self.cnn.iter().map(|c| c.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        f("theta_e".into(), &self.theta_e);
        for (i, c) in self.cnn.iter().enumerate() {
            c.visit(&format!("cnn.{i}."), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        f("theta_e".into(), &mut self.theta_e);
        for (i, c) in self.cnn.iter_mut().enumerate() {
            c.visit_mut(&format!("cnn.{i}."), f);
        }
    }
}

/// Looks up the embedding of each code: row `n` of the result is column
/// `codes[n]` of `theta_e`, shape `[n_u, d_u]`.
pub fn embed_diagnoses(tape: &mut Tape, theta_e: Var, codes: &[usize]) -> Result<Var, AutodiffError> {
    tape.embed_columns(theta_e, codes)
}

/// `conv1 -> max-pool -> ReLU -> conv2 -> max over time`, giving `[d_v]` for
/// any waveform length. An empty waveform is read as the single sample `0.0`,
/// matching [`Normalizer::apply`] on a missing measurement.
pub fn lab_feature(
    tape: &mut Tape,
    waveform: &[f64],
    cnn: &CnnParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var, AutodiffError> {
    let samples = if waveform.is_empty() { vec![0.0] } else { waveform.to_vec() };
    let x = tape.constant(Tensor::vector(samples));
    let h = tape.conv1d(x, cnn.conv1_w, cnn.conv1_b, 1)?;
    let h = tape.max_pool1d(h, cfg.pool_width, cfg.pool_width)?;
    let h = tape.relu(h);
    let h = tape.conv1d(h, cnn.conv2_w, cnn.conv2_b, 1)?;
    tape.max_axis(h, 1)
}

/// Per-indicator standardization fitted on training waveforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Pools every sample of indicator `i` across all visits of `records`.
    /// Indicators with no samples or zero spread get mean 0 / std 1.
    pub fn fit(records: &[PatientRecord], n_indicators: usize) -> Self {
        let mut sum = vec![0.0; n_indicators];
        let mut sq = vec![0.0; n_indicators];
        let mut count = vec![0usize; n_indicators];
        for v in records.iter().flat_map(|r| &r.visits) {
            for (i, w) in v.labs.iter().enumerate().take(n_indicators) {
                sum[i] += w.iter().sum::<f64>();
                sq[i] += w.iter().map(|x| x * x).sum::<f64>();
                count[i] += w.len();
            }
        }
        let mut mean = vec![0.0; n_indicators];
        let mut std = vec![1.0; n_indicators];
        for i in 0..n_indicators {
            if count[i] == 0 {
                continue;
            }
            let n = count[i] as f64;
            mean[i] = sum[i] / n;
            let var = (sq[i] / n - mean[i] * mean[i]).max(0.0);
            if var > 0.0 {
                std[i] = var.sqrt();
            }
        }
        Self { mean, std }
    }

    pub fn identity(n_indicators: usize) -> Self {
        Self {
            mean: vec![0.0; n_indicators],
            std: vec![1.0; n_indicators],
        }
    }

    /// Standardizes one waveform; a missing (empty) waveform becomes `[0.0]`.
    pub fn apply(&self, indicator: usize, wave: &[f64]) -> Vec<f64> {
        if wave.is_empty() {
            return vec![0.0];
        }
        let (m, s) = (self.mean[indicator], self.std[indicator]);
        wave.iter().map(|x| (x - m) / s).collect()
    }

    pub fn prepare(&self, record: &PatientRecord, unit: TimeUnit) -> PreparedRecord {
        let deltas = record.deltas(unit);
        PreparedRecord {
            patient_id: record.patient_id.clone(),
            label: record.label,
            visits: record
                .visits
                .iter()
                .zip(deltas)
                .map(|(v, delta)| PreparedVisit {
                    delta,
                    codes: v.diagnoses.clone(),
                    waves: v.labs.iter().enumerate().map(|(i, w)| self.apply(i, w)).collect(),
                })
                .collect(),
        }
    }
}

/// A record ready for the forward pass: gaps in model units and
/// standardized, non-empty waveforms.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedRecord {
    pub patient_id: String,
    pub label: usize,
    pub visits: Vec<PreparedVisit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedVisit {
    /// Gap since the previous visit; 0 for the first.
    pub delta: f64,
    pub codes: Vec<usize>,
    pub waves: Vec<Vec<f64>>,
}
