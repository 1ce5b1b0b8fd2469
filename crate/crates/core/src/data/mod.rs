//! Longitudinal patient records: types, validation, JSONL ingestion,
//! synthetic generation and visit-count batching.

mod batch;
mod jsonl;
mod synth;

pub use batch::{group_by_visits, split_and_batch, split_records, Batch};
pub use jsonl::{load_jsonl, parse_jsonl, write_jsonl};
pub use synth::{generate_synthetic, planted_signal, SynthConfig};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("patient {patient_id}: invalid field `{field}`: {message}")]
    Schema {
        patient_id: String,
        field: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need at least 2 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("target prevalence {target} unattainable (reached {reached} after {iterations} iterations)")]
    Prevalence {
        target: f64,
        reached: f64,
        iterations: usize,
    },
}

/// Unit in which time gaps are fed to the decay function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    #[default]
    Day,
    Year,
}

impl TimeUnit {
    /// Converts a gap in days into this unit.
    pub fn from_days(self, days: f64) -> f64 {
        match self {
            TimeUnit::Day => days,
            TimeUnit::Year => days / 365.25,
        }
    }
}

/// Dataset-level schema shared by every record of a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Size of the diagnosis code vocabulary.
    pub n_codes: usize,
    /// One name per lab indicator; its length is `n_v`.
    pub indicators: Vec<String>,
    #[serde(default)]
    pub time_unit: TimeUnit,
    /// Number of label classes `K`.
    pub n_classes: usize,
    /// Maximum number of diagnosis codes kept per visit.
    pub n_u_max: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_codes: 80,
            indicators: ["heart_rate", "spo2", "glucose", "blood_pressure"]
                .into_iter()
                .map(String::from)
                .collect(),
            time_unit: TimeUnit::Day,
            n_classes: 2,
            n_u_max: 12,
        }
    }
}

impl DatasetConfig {
    pub fn n_indicators(&self) -> usize {
        self.indicators.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_codes == 0 || self.indicators.is_empty() || self.n_u_max == 0 {
            return Err(DataError::Config(
                "n_codes, indicators and n_u_max must be non-empty".into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(DataError::Config("n_classes must be at least 2".into()));
        }
        Ok(())
    }
}

/// One hospital visit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    /// Days since the first visit.
    pub time: f64,
    /// Diagnosis code indices.
    pub diagnoses: Vec<usize>,
    /// One waveform per indicator; an empty waveform means "not measured".
    pub labs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: usize,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn n_visits(&self) -> usize {
        self.visits.len()
    }

    /// Gap before each visit in the dataset's time unit; the first is 0.
    pub fn deltas(&self, unit: TimeUnit) -> Vec<f64> {
        let mut prev = None;
        self.visits
            .iter()
            .map(|v| {
                let d = prev.map_or(0.0, |p| unit.from_days(v.time - p));
                prev = Some(v.time);
                d
            })
            .collect()
    }

    /// Checks every record and visit invariant against `cfg`.
    pub fn validate(&self, cfg: &DatasetConfig) -> Result<(), DataError> {
        let bad = |field: String, message: String| DataError::Schema {
            patient_id: self.patient_id.clone(),
            field,
            message,
        };
        if self.patient_id.is_empty() {
            return Err(bad("patient_id".into(), "must be non-empty".into()));
        }
        if self.label >= cfg.n_classes {
            return Err(bad(
                "label".into(),
                format!("{} is not below n_classes = {}", self.label, cfg.n_classes),
            ));
        }
        if self.visits.is_empty() {
            return Err(bad("visits".into(), "at least one visit required".into()));
        }
        let mut prev: Option<f64> = None;
        for (t, v) in self.visits.iter().enumerate() {
            let field = |name: &str| format!("visits[{t}].{name}");
            if !v.time.is_finite() || v.time < 0.0 {
                return Err(bad(field("time"), format!("{} is not a finite non-negative time", v.time)));
            }
            if let Some(p) = prev {
                if v.time <= p {
                    return Err(bad(
                        field("time"),
                        format!("{} does not strictly follow {}", v.time, p),
                    ));
                }
            }
            prev = Some(v.time);
            if v.diagnoses.is_empty() {
                return Err(bad(field("diagnoses"), "visits need at least one code".into()));
            }
            let mut seen = HashSet::with_capacity(v.diagnoses.len());
            for &c in &v.diagnoses {
                if c >= cfg.n_codes {
                    return Err(bad(
                        field("diagnoses"),
                        format!("code {c} is not below n_codes = {}", cfg.n_codes),
                    ));
                }
                if !seen.insert(c) {
                    return Err(bad(field("diagnoses"), format!("code {c} repeated")));
                }
            }
            if v.labs.len() != cfg.n_indicators() {
                return Err(bad(
                    field("labs"),
                    format!("{} waveforms, expected {}", v.labs.len(), cfg.n_indicators()),
                ));
            }
            if v.labs.iter().flatten().any(|x| !x.is_finite()) {
                return Err(bad(field("labs"), "non-finite sample".into()));
            }
        }
        Ok(())
    }
}

/// Truncates visits with more than `n_u_max` codes to the `n_u_max` codes
/// that are most frequent across `records` (lower index wins ties). Kept
/// codes stay in their original order.
pub fn cap_codes(records: &mut [PatientRecord], n_u_max: usize, n_codes: usize) {
    let mut freq = vec![0usize; n_codes];
    for c in records.iter().flat_map(|r| &r.visits).flat_map(|v| &v.diagnoses) {
        if *c < n_codes {
            freq[*c] += 1;
        }
    }
    for v in records.iter_mut().flat_map(|r| r.visits.iter_mut()) {
        if v.diagnoses.len() <= n_u_max {
            continue;
        }
        let mut ranked = v.diagnoses.clone();
        ranked.sort_by(|a, b| freq[*b].cmp(&freq[*a]).then(a.cmp(b)));
        let keep: HashSet<usize> = ranked.into_iter().take(n_u_max).collect();
        v.diagnoses.retain(|c| keep.contains(c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, times: &[f64]) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            label: 1,
            visits: times
                .iter()
                .map(|&t| Visit {
                    time: t,
                    diagnoses: vec![0, 3],
                    labs: vec![vec![1.0, 2.0], vec![]],
                })
                .collect(),
        }
    }

    fn cfg() -> DatasetConfig {
        DatasetConfig {
            n_codes: 5,
            indicators: vec!["a".into(), "b".into()],
            time_unit: TimeUnit::Day,
            n_classes: 2,
            n_u_max: 3,
        }
    }

    #[test]
    fn valid_record_passes() {
        record("p", &[0.0, 3.5, 10.0]).validate(&cfg()).unwrap();
    }

    #[test]
    fn each_corruption_is_rejected() {
        let c = cfg();
        let base = record("p", &[0.0, 2.0]);
        let mutations: Vec<(&str, Box<dyn Fn(&mut PatientRecord)>)> = vec![
            ("label", Box::new(|r| r.label = 2)),
            ("visits", Box::new(|r| r.visits.clear())),
            ("time", Box::new(|r| r.visits[1].time = 0.0)),
            ("time", Box::new(|r| r.visits[0].time = f64::NAN)),
            ("diagnoses", Box::new(|r| r.visits[0].diagnoses = vec![])),
            ("diagnoses", Box::new(|r| r.visits[0].diagnoses = vec![1, 1])),
            ("diagnoses", Box::new(|r| r.visits[1].diagnoses = vec![5])),
            ("labs", Box::new(|r| r.visits[0].labs.pop().map(drop).unwrap_or(()))),
            ("labs", Box::new(|r| r.visits[0].labs[0][0] = f64::INFINITY)),
        ];
        for (field, m) in mutations {
            let mut r = base.clone();
            m(&mut r);
            match r.validate(&c) {
                Err(DataError::Schema { patient_id, field: f, .. }) => {
                    assert_eq!(patient_id, "p");
                    assert!(f.contains(field), "{f} vs {field}");
                }
                other => panic!("expected schema error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn deltas_start_at_zero_and_convert_units() {
        let r = record("p", &[0.0, 365.25, 730.5]);
        assert_eq!(r.deltas(TimeUnit::Day), vec![0.0, 365.25, 365.25]);
        assert_eq!(r.deltas(TimeUnit::Year), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn capping_keeps_most_frequent_in_order() {
        let mut rs = vec![record("a", &[0.0]), record("b", &[0.0])];
        rs[0].visits[0].diagnoses = vec![4, 2, 0, 1];
        rs[1].visits[0].diagnoses = vec![2, 1];
        // freq: 2 -> 2, 1 -> 2, 0 -> 1, 4 -> 1
        cap_codes(&mut rs, 3, 5);
        assert_eq!(rs[0].visits[0].diagnoses, vec![2, 0, 1]);
        assert_eq!(rs[1].visits[0].diagnoses, vec![2, 1]);
    }
}
