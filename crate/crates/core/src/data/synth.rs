//! Synthetic cohort with a planted cross-modal, time-decayed label signal.
//!
//! A patient's risk score is
//!
//! ```text
//! S = sum_t g2(t_T - t_t) * [marker code in D^t] * z_t
//! ```
//!
//! where `z_t` is the standardized mean of the marker indicator at visit `t`,
//! and the label is drawn from `Bernoulli(sigmoid(beta * S + b))`. The
//! intercept `b` is solved by bisection so the expected prevalence matches
//! the configured target.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetConfig, PatientRecord, Visit};
use crate::attention::Decay;
use crate::autodiff::sigmoid;

const BISECTION_ITERS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Visit counts are uniform on `[2, max_visits]`.
    pub max_visits: usize,
    /// Inter-visit gaps in days, log-uniform on `[gap_min, gap_max]`.
    pub gap_min: f64,
    pub gap_max: f64,
    /// Waveform lengths are uniform on `[wave_len_min, wave_len_max]`.
    pub wave_len_min: usize,
    pub wave_len_max: usize,
    /// Zipf exponent over the code vocabulary (code 0 is the most common).
    pub zipf_exponent: f64,
    pub marker_code: usize,
    pub marker_indicator: usize,
    /// Step standard deviation of the waveform random walk, in units of the
    /// visit-level spread.
    pub walk_step: f64,
    /// Probability that a waveform is missing (empty).
    pub missing_rate: f64,
    pub beta: f64,
    pub target_prevalence: f64,
    pub prevalence_tolerance: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            max_visits: 8,
            gap_min: 1.0,
            gap_max: 365.0,
            wave_len_min: 16,
            wave_len_max: 64,
            zipf_exponent: 1.0,
            marker_code: 1,
            marker_indicator: 0,
            walk_step: 0.1,
            missing_rate: 0.0,
            beta: 8.0,
            target_prevalence: 0.5,
            prevalence_tolerance: 0.02,
        }
    }
}

impl SynthConfig {
    fn validate(&self, ds: &DatasetConfig) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::Config(m.to_string()));
        if self.n_patients == 0 || self.max_visits < 2 {
            return fail("n_patients must be positive and max_visits at least 2");
        }
        if !(self.gap_min > 0.0 && self.gap_max >= self.gap_min) {
            return fail("gaps must satisfy 0 < gap_min <= gap_max");
        }
        if self.wave_len_min == 0 || self.wave_len_max < self.wave_len_min {
            return fail("waveform lengths must satisfy 0 < min <= max");
        }
        if self.marker_code >= ds.n_codes || self.marker_indicator >= ds.n_indicators() {
            return fail("marker code/indicator outside the dataset vocabulary");
        }
        if ds.n_u_max > ds.n_codes {
            return fail("n_u_max cannot exceed n_codes");
        }
        if !(self.zipf_exponent > 0.0) || !(self.walk_step >= 0.0) {
            return fail("zipf_exponent must be positive and walk_step non-negative");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return fail("missing_rate must lie in [0, 1)");
        }
        if ds.n_classes != 2 {
            return fail("the synthetic task is binary (n_classes = 2)");
        }
        Ok(())
    }
}

const CENTERS: [(f64, f64); 4] = [(80.0, 10.0), (97.0, 2.0), (110.0, 25.0), (90.0, 12.0)];

/// Draws a cohort. The output is a pure function of `(ds, cfg, seed)`.
pub fn generate_synthetic(
    ds: &DatasetConfig,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Vec<PatientRecord>, DataError> {
    ds.validate()?;
    cfg.validate(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = Zipf::new(ds.n_codes as u64, cfg.zipf_exponent)
        .map_err(|e| DataError::Config(e.to_string()))?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (lg_min, lg_max) = (cfg.gap_min.ln(), cfg.gap_max.ln());

    let mut records = Vec::with_capacity(cfg.n_patients);
    for p in 0..cfg.n_patients {
        let n_visits = rng.gen_range(2..=cfg.max_visits);
        let mut time = 0.0;
        let mut visits = Vec::with_capacity(n_visits);
        for t in 0..n_visits {
            if t > 0 {
                time += rng.gen_range(lg_min..=lg_max).exp();
            }
            let n_u = rng.gen_range(1..=ds.n_u_max);
            let mut codes = Vec::with_capacity(n_u);
            while codes.len() < n_u {
                let c = zipf.sample(&mut rng) as usize - 1;
                if !codes.contains(&c) {
                    codes.push(c);
                }
            }
            let labs = (0..ds.n_indicators())
                .map(|i| {
                    let (center, scale) = CENTERS[i % CENTERS.len()];
                    let len = rng.gen_range(cfg.wave_len_min..=cfg.wave_len_max);
                    let missing = rng.gen::<f64>() < cfg.missing_rate;
                    let mut x: f64 = std_normal.sample(&mut rng);
                    let wave: Vec<f64> = (0..len)
                        .map(|_| {
                            x += cfg.walk_step * std_normal.sample(&mut rng);
                            center + scale * x
                        })
                        .collect();
                    if missing {
                        Vec::new()
                    } else {
                        wave
                    }
                })
                .collect();
            visits.push(Visit {
                time,
                diagnoses: codes,
                labs,
            });
        }
        records.push(PatientRecord {
            patient_id: format!("syn{p:05}"),
            label: 0,
            visits,
        });
    }

    let signal = planted_signal(&records, ds, cfg);
    let intercept = solve_intercept(&signal, cfg)?;
    for (r, s) in records.iter_mut().zip(&signal) {
        let p = sigmoid(cfg.beta * s + intercept);
        r.label = usize::from(rng.gen::<f64>() < p);
    }
    Ok(records)
}

/// Recomputes the planted risk score `S` of every record from its contents.
///
/// `z_t` is standardized with the mean and standard deviation of the marker
/// indicator's per-visit means over all of `records`; a missing waveform
/// contributes `z_t = 0`.
pub fn planted_signal(records: &[PatientRecord], ds: &DatasetConfig, cfg: &SynthConfig) -> Vec<f64> {
    let i = cfg.marker_indicator;
    let wave_mean = |w: &[f64]| (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64);
    let means: Vec<f64> = records
        .iter()
        .flat_map(|r| &r.visits)
        .filter_map(|v| wave_mean(&v.labs[i]))
        .collect();
    let n = means.len().max(1) as f64;
    let mu = means.iter().sum::<f64>() / n;
    let sd = (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };

    records
        .iter()
        .map(|r| {
            let now = r.visits.last().map_or(0.0, |v| v.time);
            r.visits
                .iter()
                .filter(|v| v.diagnoses.contains(&cfg.marker_code))
                .filter_map(|v| {
                    let z = (wave_mean(&v.labs[i])? - mu) / sd;
                    let age = ds.time_unit.from_days(now - v.time);
                    Some(Decay::G2.eval(age) * z)
                })
                .sum()
        })
        .collect()
}

fn solve_intercept(signal: &[f64], cfg: &SynthConfig) -> Result<f64, DataError> {
    let target = cfg.target_prevalence;
    let prevalence =
        |b: f64| signal.iter().map(|s| sigmoid(cfg.beta * s + b)).sum::<f64>() / signal.len() as f64;
    if !(target > 0.0 && target < 1.0) {
        return Err(DataError::Prevalence {
            target,
            reached: f64::NAN,
            iterations: 0,
        });
    }
    let (mut lo, mut hi) = (-60.0_f64, 60.0_f64);
    let mut iterations = 0;
    while iterations < BISECTION_ITERS && hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if prevalence(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    let b = 0.5 * (lo + hi);
    let reached = prevalence(b);
    if (reached - target).abs() > cfg.prevalence_tolerance {
        return Err(DataError::Prevalence {
            target,
            reached,
            iterations,
        });
    }
    Ok(b)
}
