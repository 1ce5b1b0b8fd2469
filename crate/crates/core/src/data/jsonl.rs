use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use super::{cap_codes, DataError, DatasetConfig, PatientRecord, Visit};

// Signed fields so that negative codes and labels surface as schema errors
// naming the patient instead of anonymous parse failures.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    patient_id: String,
    label: i64,
    visits: Vec<RawVisit>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVisit {
    time: f64,
    diagnoses: Vec<i64>,
    labs: Vec<Vec<f64>>,
}

fn to_index(patient_id: &str, field: String, v: i64) -> Result<usize, DataError> {
    usize::try_from(v).map_err(|_| DataError::Schema {
        patient_id: patient_id.to_string(),
        field,
        message: format!("{v} is negative"),
    })
}

impl RawRecord {
    fn into_record(self) -> Result<PatientRecord, DataError> {
        let id = self.patient_id;
        let label = to_index(&id, "label".into(), self.label)?;
        let visits = self
            .visits
            .into_iter()
            .enumerate()
            .map(|(t, v)| {
                let diagnoses = v
                    .diagnoses
                    .into_iter()
                    .map(|c| to_index(&id, format!("visits[{t}].diagnoses"), c))
                    .collect::<Result<_, _>>()?;
                Ok(Visit {
                    time: v.time,
                    diagnoses,
                    labs: v.labs,
                })
            })
            .collect::<Result<_, DataError>>()?;
        Ok(PatientRecord {
            patient_id: id,
            label,
            visits,
        })
    }
}

/// Parses and validates JSONL text; blank lines are skipped. Visits with
/// more than `n_u_max` codes are capped (see [`cap_codes`]).
pub fn parse_jsonl(text: &str, cfg: &DatasetConfig) -> Result<Vec<PatientRecord>, DataError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let rec = raw.into_record()?;
        rec.validate(cfg)?;
        out.push(rec);
    }
    cap_codes(&mut out, cfg.n_u_max, cfg.n_codes);
    Ok(out)
}

pub fn load_jsonl(path: &Path, cfg: &DatasetConfig) -> Result<Vec<PatientRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl(&text, cfg)
}

/// One compact JSON object per line, in slice order.
pub fn write_jsonl<W: Write>(records: &[PatientRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
