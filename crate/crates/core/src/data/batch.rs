use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, PatientRecord};

/// Records sharing one visit count.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub records: Vec<PatientRecord>,
}

impl Batch {
    pub fn n_visits(&self) -> usize {
        self.records.first().map_or(0, PatientRecord::n_visits)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Seeded shuffle then cut: `round(ratio * n)` records (clamped to
/// `[1, n - 1]`) go to the training side.
pub fn split_records(
    records: &[PatientRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::Config(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n = records.len();
    if n < 2 {
        return Err(DataError::TooFewRecords(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Groups records by visit count, ascending in `T`, keeping input order
/// within a group.
pub fn group_by_visits(records: Vec<PatientRecord>) -> Vec<Batch> {
    let mut groups: BTreeMap<usize, Vec<PatientRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.n_visits()).or_default().push(r);
    }
    groups.into_values().map(|records| Batch { records }).collect()
}

pub fn split_and_batch(
    records: &[PatientRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Batch>, Vec<Batch>), DataError> {
    let (train, test) = split_records(records, ratio, seed)?;
    Ok((group_by_visits(train), group_by_visits(test)))
}
