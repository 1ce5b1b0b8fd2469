//! Time-guided query and the three attention units that score diagnosis
//! codes and lab indicators at one visit.
//!
//! All units are bilinear forms squashed by `tanh`, so every score lies in
//! `(-1, 1)`:
//!
//! * intra-sequence: `tanh((A u_i)^T B q)` per modality,
//! * inter-sequence: a code x indicator correlation matrix contracted along
//!   the other modality with a learned 1x1 kernel,
//! * third-order: the same matrix with the code side modulated elementwise by
//!   a projection of the query.
//!
//! Scores are mixed linearly and normalized with a (masked) softmax.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::params::param_group;
use crate::{Error, Result};

/// Time-decay applied to the memory query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    /// No decay.
    G1,
    /// `1 / ln(e + delta)`
    #[default]
    G2,
    /// `e / (delta + e)`
    G3,
    /// `max(0, 1 - delta / e)`
    G4,
}

impl Decay {
    pub const ALL: [Decay; 4] = [Decay::G1, Decay::G2, Decay::G3, Decay::G4];

    /// Evaluates the decay for a non-negative gap.
    pub fn eval(self, delta: f64) -> f64 {
        debug_assert!(delta >= 0.0);
        let e = std::f64::consts::E;
        match self {
            Decay::G1 => 1.0,
            Decay::G2 => 1.0 / (e + delta).ln(),
            Decay::G3 => e / (delta + e),
            Decay::G4 => (1.0 - delta / e).max(0.0),
        }
    }
}

/// Checked form of [`Decay::eval`].
pub fn decay(delta: f64, kind: Decay) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::NegativeDelta(delta));
    }
    Ok(kind.eval(delta))
}

impl fmt::Display for Decay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Decay::G1 => "g1",
            Decay::G2 => "g2",
            Decay::G3 => "g3",
            Decay::G4 => "g4",
        };
        f.write_str(s)
    }
}

impl FromStr for Decay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Decay::ALL
            .into_iter()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown decay `{s}` (expected g1..g4)")))
    }
}

/// Which score terms are active and how the query is time-scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub use_intra: bool,
    pub use_inter: bool,
    pub use_third: bool,
    pub use_time_guide: bool,
    pub decay: Decay,
}

impl AblationConfig {
    fn needs_query(&self) -> bool {
        self.use_intra || self.use_third
    }

    pub fn any_unit(&self) -> bool {
        self.use_intra || self.use_inter || self.use_third
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        Ablation::Tghoa.config(Decay::G2)
    }
}

/// The model ladder, from plain LSTM to the full time-guided high-order model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Uniform attention (mean pooling).
    Lstm,
    /// Intra-sequence unit without time guidance.
    LstmAtt,
    /// Time-guided intra-sequence unit.
    LstmTga,
    /// Inter-sequence correlation only.
    LstmCoa,
    /// Time-guided intra plus inter.
    Tgcoa,
    /// All units, time-guided.
    Tghoa,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Lstm,
        Ablation::LstmAtt,
        Ablation::LstmTga,
        Ablation::LstmCoa,
        Ablation::Tgcoa,
        Ablation::Tghoa,
    ];

    pub fn config(self, decay: Decay) -> AblationConfig {
        let (use_intra, use_inter, use_third, use_time_guide) = match self {
            Ablation::Lstm => (false, false, false, false),
            Ablation::LstmAtt => (true, false, false, false),
            Ablation::LstmTga => (true, false, false, true),
            Ablation::LstmCoa => (false, true, false, false),
            Ablation::Tgcoa => (true, true, false, true),
            Ablation::Tghoa => (true, true, true, true),
        };
        AblationConfig {
            use_intra,
            use_inter,
            use_third,
            use_time_guide,
            decay,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ablation::Lstm => "lstm",
            Ablation::LstmAtt => "lstm-att",
            Ablation::LstmTga => "lstm-tga",
            Ablation::LstmCoa => "lstm-coa",
            Ablation::Tgcoa => "tgcoa",
            Ablation::Tghoa => "tghoa",
        };
        f.write_str(s)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

param_group! {
    /// Query projection, the three units' projections and contraction
    /// kernels, and the combination weights `eta` (codes) / `epsilon`
    /// (indicators), each of length 4.
    AttentionParams {
        /// `[d, d]`
        theta_d,
        /// `[d]`
        b_d,
        /// `[d, d_u]`
        theta_u1,
        /// `[d, d_v]`
        theta_v1,
        /// `[d, d]`
        theta_uq,
        /// `[d, d]`
        theta_vq,
        /// `[d, d_u]`
        theta_u2,
        /// `[d, d_v]`
        theta_v2,
        /// `[n_u_max]`
        theta_u2_kernel,
        /// `[n_v]`
        theta_v2_kernel,
        /// `[d, d_u]`
        theta_u3,
        /// `[d, d_v]`
        theta_v3,
        /// `[d, d]`
        theta_q,
        /// `[n_u_max]`
        theta_u3_kernel,
        /// `[n_v]`
        theta_v3_kernel,
        /// `[4]`
        eta,
        /// `[4]`
        epsilon,
    }
}

/// One visit's features on the tape.
#[derive(Clone, Debug)]
pub struct VisitFeatures {
    /// Code embeddings padded with zero rows to `[n_u_max, d_u]`.
    pub codes: Var,
    /// Lab features `[n_v, d_v]`.
    pub labs: Var,
    /// `true` for real code slots.
    pub mask: Vec<bool>,
}

impl VisitFeatures {
    pub fn n_codes(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// A pair of per-code and per-indicator scores.
#[derive(Clone, Copy, Debug)]
pub struct ScorePair {
    pub codes: Var,
    pub labs: Var,
}

/// `q = g(delta) * tanh(theta_d c_prev + b_d)`, with `g = 1` when time guidance
/// is off. Returns the query and the applied factor.
pub fn memory_query(
    tape: &mut Tape,
    c_prev: Var,
    delta: f64,
    p: &AttentionParams<Var>,
    cfg: &AblationConfig,
) -> Result<(Var, f64)> {
    let g = if cfg.use_time_guide {
        decay(delta, cfg.decay)?
    } else {
        1.0
    };
    let z = tape.matvec(p.theta_d, c_prev)?;
    let z = tape.add(z, p.b_d)?;
    let z = tape.tanh(z);
    Ok((tape.scale(z, g), g))
}

// tanh((M a_i)^T r) for every row a_i of `rows`.
fn bilinear_rows(tape: &mut Tape, rows: Var, proj: Var, r: Var) -> Result<Var> {
    let pt = tape.transpose(proj)?;
    let a = tape.matmul(rows, pt)?;
    let s = tape.matvec(a, r)?;
    Ok(tape.tanh(s))
}

/// Intra-sequence temporality scores `lambda_{u,q}`, `lambda_{v,q}`.
pub fn intra_seq_scores(
    tape: &mut Tape,
    f: &VisitFeatures,
    q: Var,
    p: &AttentionParams<Var>,
) -> Result<ScorePair> {
    let rq = tape.matvec(p.theta_uq, q)?;
    let codes = bilinear_rows(tape, f.codes, p.theta_u1, rq)?;
    let rq = tape.matvec(p.theta_vq, q)?;
    let labs = bilinear_rows(tape, f.labs, p.theta_v1, rq)?;
    Ok(ScorePair { codes, labs })
}

fn check_codes(f: &VisitFeatures, kernel: &Tensor) -> Result<()> {
    if f.mask.len() > kernel.len() {
        return Err(Error::TooManyCodes {
            n_u: f.n_codes(),
            n_u_max: kernel.len(),
        });
    }
    Ok(())
}

// Contracts a correlation matrix C [n_u_max, n_v] with the kernels:
// codes: tanh(C theta_v), labs: tanh(C^T (theta_u * mask)).
fn contract(
    tape: &mut Tape,
    corr: Var,
    code_kernel: Var,
    lab_kernel: Var,
    mask: &[bool],
) -> Result<ScorePair> {
    let codes = tape.matvec(corr, lab_kernel)?;
    let codes = tape.tanh(codes);
    let m = tape.constant(Tensor::vector(
        mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    ));
    let ku = tape.mul(code_kernel, m)?;
    let ct = tape.transpose(corr)?;
    let labs = tape.matvec(ct, ku)?;
    Ok(ScorePair {
        codes,
        labs: tape.tanh(labs),
    })
}

/// Inter-sequence correlation: returns `C_{u,v}` and its contractions.
pub fn inter_seq_scores(
    tape: &mut Tape,
    f: &VisitFeatures,
    p: &AttentionParams<Var>,
) -> Result<(Var, ScorePair)> {
    check_codes(f, tape.value(p.theta_u2_kernel))?;
    let pu = tape.transpose(p.theta_u2)?;
    let pu = tape.matmul(f.codes, pu)?;
    let pv = tape.transpose(p.theta_v2)?;
    let pv = tape.matmul(f.labs, pv)?;
    let pvt = tape.transpose(pv)?;
    let corr = tape.matmul(pu, pvt)?;
    let s = contract(tape, corr, p.theta_u2_kernel, p.theta_v2_kernel, &f.mask)?;
    Ok((corr, s))
}

/// Time-guided third-order correlation: returns `C_{u,v,q}` and its
/// contractions.
pub fn third_order_scores(
    tape: &mut Tape,
    f: &VisitFeatures,
    q: Var,
    p: &AttentionParams<Var>,
) -> Result<(Var, ScorePair)> {
    check_codes(f, tape.value(p.theta_u3_kernel))?;
    let pu = tape.transpose(p.theta_u3)?;
    let pu = tape.matmul(f.codes, pu)?;
    let rq = tape.matvec(p.theta_q, q)?;
    let pu = tape.scale_cols(pu, rq)?;
    let pv = tape.transpose(p.theta_v3)?;
    let pv = tape.matmul(f.labs, pv)?;
    let pvt = tape.transpose(pv)?;
    let corr = tape.matmul(pu, pvt)?;
    let s = contract(tape, corr, p.theta_u3_kernel, p.theta_v3_kernel, &f.mask)?;
    Ok((corr, s))
}

// softmax(sum_k w_k * terms_k + w_4) where absent terms count as zero.
fn mix(
    tape: &mut Tape,
    terms: [Option<Var>; 3],
    weights: Var,
    n: usize,
    mask: Option<&[bool]>,
) -> std::result::Result<Var, AutodiffError> {
    let mut cols = Vec::with_capacity(4);
    for t in terms {
        cols.push(match t {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(&[n])),
        });
    }
    cols.push(tape.constant(Tensor::filled(&[n], 1.0)));
    let stacked = tape.concat(&cols)?;
    let stacked = tape.reshape(stacked, &[4, n])?;
    let stacked = tape.transpose(stacked)?;
    let logits = tape.matvec(stacked, weights)?;
    tape.softmax(logits, mask)
}

/// Scores from whichever units ran at one visit.
#[derive(Clone, Copy, Debug, Default)]
pub struct UnitScores {
    pub intra: Option<ScorePair>,
    pub inter: Option<ScorePair>,
    pub third: Option<ScorePair>,
}

/// Mixes unit scores into `alpha_u` (masked to real codes) and `alpha_v`.
pub fn combine_scores(
    tape: &mut Tape,
    scores: &UnitScores,
    p: &AttentionParams<Var>,
    mask: &[bool],
    n_labs: usize,
) -> Result<(Var, Var)> {
    let pick = |s: Option<ScorePair>, codes: bool| s.map(|s| if codes { s.codes } else { s.labs });
    let alpha_u = mix(
        tape,
        [
            pick(scores.intra, true),
            pick(scores.inter, true),
            pick(scores.third, true),
        ],
        p.eta,
        mask.len(),
        Some(mask),
    )?;
    let alpha_v = mix(
        tape,
        [
            pick(scores.intra, false),
            pick(scores.inter, false),
            pick(scores.third, false),
        ],
        p.epsilon,
        n_labs,
        None,
    )?;
    Ok((alpha_u, alpha_v))
}

/// Everything computed by the attention block at one visit.
#[derive(Clone, Debug)]
pub struct VisitAttention {
    pub query: Option<Var>,
    pub decay_factor: f64,
    pub scores: UnitScores,
    pub inter_corr: Option<Var>,
    pub third_corr: Option<Var>,
    pub alpha_u: Var,
    pub alpha_v: Var,
}

/// Runs the enabled units for one visit and combines them.
pub fn attend(
    tape: &mut Tape,
    f: &VisitFeatures,
    c_prev: Var,
    delta: f64,
    p: &AttentionParams<Var>,
    cfg: &AblationConfig,
) -> Result<VisitAttention> {
    let (query, decay_factor) = if cfg.needs_query() {
        let (q, g) = memory_query(tape, c_prev, delta, p, cfg)?;
        (Some(q), g)
    } else {
        (None, 1.0)
    };
    let mut scores = UnitScores::default();
    let (mut inter_corr, mut third_corr) = (None, None);
    if let (true, Some(q)) = (cfg.use_intra, query) {
        scores.intra = Some(intra_seq_scores(tape, f, q, p)?);
    }
    if cfg.use_inter {
        let (c, s) = inter_seq_scores(tape, f, p)?;
        inter_corr = Some(c);
        scores.inter = Some(s);
    }
    if let (true, Some(q)) = (cfg.use_third, query) {
        let (c, s) = third_order_scores(tape, f, q, p)?;
        third_corr = Some(c);
        scores.third = Some(s);
    }
    let n_labs = tape.value(f.labs).rows();
    let (alpha_u, alpha_v) = combine_scores(tape, &scores, p, &f.mask, n_labs)?;
    Ok(VisitAttention {
        query,
        decay_factor,
        scores,
        inter_corr,
        third_corr,
        alpha_u,
        alpha_v,
    })
}

/// Serializable record of one visit's attention, kept for explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitTrace {
    pub delta: f64,
    pub decay_factor: f64,
    pub codes: Vec<usize>,
    /// Over the padded code slots; entries past `codes.len()` are exactly 0.
    pub alpha_u: Vec<f64>,
    pub alpha_v: Vec<f64>,
    pub query: Option<Vec<f64>>,
    pub lambda_uq: Option<Vec<f64>>,
    pub lambda_vq: Option<Vec<f64>>,
    pub lambda_uv_codes: Option<Vec<f64>>,
    pub lambda_uv_labs: Option<Vec<f64>>,
    pub lambda_uvq_codes: Option<Vec<f64>>,
    pub lambda_uvq_labs: Option<Vec<f64>>,
}

impl VisitTrace {
    pub fn capture(tape: &Tape, a: &VisitAttention, delta: f64, codes: &[usize]) -> Self {
        let get = |v: Var| tape.value(v).data().to_vec();
        let pair = |s: Option<ScorePair>| s.map(|s| (get(s.codes), get(s.labs))).unzip();
        let (lambda_uq, lambda_vq) = pair(a.scores.intra);
        let (lambda_uv_codes, lambda_uv_labs) = pair(a.scores.inter);
        let (lambda_uvq_codes, lambda_uvq_labs) = pair(a.scores.third);
        Self {
            delta,
            decay_factor: a.decay_factor,
            codes: codes.to_vec(),
            alpha_u: get(a.alpha_u),
            alpha_v: get(a.alpha_v),
            query: a.query.map(get),
            lambda_uq,
            lambda_vq,
            lambda_uv_codes,
            lambda_uv_labs,
            lambda_uvq_codes,
            lambda_uvq_labs,
        }
    }
}

/// Per-visit traces for one patient.
pub type AttentionTrace = Vec<VisitTrace>;
