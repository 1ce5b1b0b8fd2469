use serde::{Deserialize, Serialize};

use crate::features::PreparedRecord;
use crate::sequence::Model;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCode {
    pub code: usize,
    pub alpha: f64,
    pub lambda_uq: Option<f64>,
    pub lambda_uv: Option<f64>,
    pub lambda_uvq: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedIndicator {
    pub indicator: usize,
    pub name: String,
    pub alpha: f64,
    pub lambda_vq: Option<f64>,
    pub lambda_uv: Option<f64>,
    pub lambda_uvq: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitExplanation {
    pub visit: usize,
    pub delta: f64,
    pub decay_factor: f64,
    pub codes: Vec<RankedCode>,
    pub indicators: Vec<RankedIndicator>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub patient_id: String,
    pub label: usize,
    pub probs: Vec<f64>,
    pub visits: Vec<VisitExplanation>,
}

impl VisitExplanation {
    /// Position of `code` in the ranking, 0 being the most attended.
    pub fn code_rank(&self, code: usize) -> Option<usize> {
        self.codes.iter().position(|c| c.code == code)
    }
}

fn at(v: &Option<Vec<f64>>, i: usize) -> Option<f64> {
    v.as_ref().map(|v| v[i])
}

/// Codes by descending `alpha_u` and indicators by descending `alpha_v` at
/// every visit. Ties keep input order.
pub fn explain(model: &Model, record: &PreparedRecord, indicator_names: &[String]) -> Result<Explanation> {
    let pred = model.predict(record)?;
    let visits = pred
        .trace
        .iter()
        .enumerate()
        .map(|(t, tr)| {
            let mut codes: Vec<RankedCode> = tr
                .codes
                .iter()
                .enumerate()
                .map(|(i, &code)| RankedCode {
                    code,
                    alpha: tr.alpha_u[i],
                    lambda_uq: at(&tr.lambda_uq, i),
                    lambda_uv: at(&tr.lambda_uv_codes, i),
                    lambda_uvq: at(&tr.lambda_uvq_codes, i),
                })
                .collect();
            codes.sort_by(|a, b| b.alpha.total_cmp(&a.alpha));
            let mut indicators: Vec<RankedIndicator> = tr
                .alpha_v
                .iter()
                .enumerate()
                .map(|(i, &alpha)| RankedIndicator {
                    indicator: i,
                    name: indicator_names.get(i).cloned().unwrap_or_else(|| format!("indicator_{i}")),
                    alpha,
                    lambda_vq: at(&tr.lambda_vq, i),
                    lambda_uv: at(&tr.lambda_uv_labs, i),
                    lambda_uvq: at(&tr.lambda_uvq_labs, i),
                })
                .collect();
            indicators.sort_by(|a, b| b.alpha.total_cmp(&a.alpha));
            VisitExplanation {
                visit: t,
                delta: tr.delta,
                decay_factor: tr.decay_factor,
                codes,
                indicators,
            }
        })
        .collect();
    Ok(Explanation {
        patient_id: record.patient_id.clone(),
        label: record.label,
        probs: pred.probs,
        visits,
    })
}
