//! Attended pooling, the LSTM over visits, the prediction head and the loss.

mod checkpoint;

pub use checkpoint::{Checkpoint, SplitSpec, CHECKPOINT_FORMAT};

use crate::attention::{attend, AblationConfig, AttentionTrace, VisitFeatures, VisitTrace};
use crate::autodiff::{Tape, Tensor, Var};
use crate::features::{embed_diagnoses, lab_feature, PreparedRecord, PreparedVisit};
use crate::params::{param_group, ModelConfig, ModelParams};
use crate::{Error, Result};

const PROB_FLOOR: f64 = 1e-12;

param_group! {
    /// Gate weights act on `[x ; h_prev]`.
    LstmParams {
        /// `[d, d_x + d]`
        w_i,
        w_f,
        w_o,
        w_g,
        /// `[d]`
        b_i,
        b_f,
        b_o,
        b_g,
    }
}

param_group! {
    /// `softmax(theta_o relu(fo_w h + fo_b) + b_o)`
    HeadParams {
        /// `[d / 2, d]`
        fo_w,
        fo_b,
        /// `[K, d / 2]`
        theta_o,
        b_o,
    }
}

/// Puts every parameter on the tape, as trainable leaves or as constants.
pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ModelParams<Var> {
    params.map(&mut |t: &Tensor| {
        if trainable {
            tape.param(t)
        } else {
            tape.constant(t.clone())
        }
    })
}

/// Embeds the codes (zero-padded to `n_u_max` rows) and runs every
/// indicator's CNN.
pub fn visit_features(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    visit: &PreparedVisit,
) -> Result<VisitFeatures> {
    let n_u = visit.codes.len();
    if n_u > cfg.n_u_max {
        return Err(Error::TooManyCodes {
            n_u,
            n_u_max: cfg.n_u_max,
        });
    }
    if visit.waves.len() != cfg.n_indicators {
        return Err(Error::Config(format!(
            "visit has {} waveforms, model expects {}",
            visit.waves.len(),
            cfg.n_indicators
        )));
    }
    let mut codes = embed_diagnoses(tape, p.features.theta_e, &visit.codes)?;
    if n_u < cfg.n_u_max {
        let pad = tape.constant(Tensor::zeros(&[(cfg.n_u_max - n_u) * cfg.code_dim]));
        let flat = tape.concat(&[codes, pad])?;
        codes = tape.reshape(flat, &[cfg.n_u_max, cfg.code_dim])?;
    }
    let mut labs = Vec::with_capacity(cfg.n_indicators);
    for (wave, cnn) in visit.waves.iter().zip(&p.features.cnn) {
        labs.push(lab_feature(tape, wave, cnn, cfg)?);
    }
    let labs = tape.concat(&labs)?;
    let labs = tape.reshape(labs, &[cfg.n_indicators, cfg.lab_dim])?;
    Ok(VisitFeatures {
        codes,
        labs,
        mask: (0..cfg.n_u_max).map(|i| i < n_u).collect(),
    })
}

/// `x = [sum_i alpha_u(i) u_i ; alpha_v(1) v_1 ; ... ; alpha_v(n_v) v_{n_v}]`.
pub fn attend_pool(tape: &mut Tape, f: &VisitFeatures, alpha_u: Var, alpha_v: Var) -> Result<Var> {
    let ut = tape.transpose(f.codes)?;
    let pooled = tape.matvec(ut, alpha_u)?;
    let weighted = tape.scale_rows(f.labs, alpha_v)?;
    let n = tape.value(weighted).len();
    let weighted = tape.reshape(weighted, &[n])?;
    Ok(tape.concat(&[pooled, weighted])?)
}

/// One LSTM step; returns `(h, c)`.
pub fn lstm_step(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, p: &LstmParams<Var>) -> Result<(Var, Var)> {
    let z = tape.concat(&[x, h_prev])?;
    let mut gate = |w: Var, b: Var| -> Result<Var> {
        let a = tape.matvec(w, z)?;
        Ok(tape.add(a, b)?)
    };
    let i = gate(p.w_i, p.b_i)?;
    let f = gate(p.w_f, p.b_f)?;
    let o = gate(p.w_o, p.b_o)?;
    let g = gate(p.w_g, p.b_g)?;
    let (i, f, o, g) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o), tape.tanh(g));
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Class probabilities from the last hidden state.
pub fn head(tape: &mut Tape, h: Var, p: &HeadParams<Var>) -> Result<Var> {
    let z = tape.matvec(p.fo_w, h)?;
    let z = tape.add(z, p.fo_b)?;
    let z = tape.relu(z);
    let logits = tape.matvec(p.theta_o, z)?;
    let logits = tape.add(logits, p.b_o)?;
    Ok(tape.softmax(logits, None)?)
}

/// `-sum_k y_k ln p_k - sum_k (1 - y_k) ln(1 - p_k)` with one-hot `y` and
/// both probabilities floored at `1e-12`.
pub fn loss(tape: &mut Tape, probs: Var, label: usize) -> Result<Var> {
    let k = tape.value(probs).len();
    if label >= k {
        return Err(Error::Config(format!("label {label} out of range for {k} classes")));
    }
    let y: Vec<f64> = (0..k).map(|j| if j == label { 1.0 } else { 0.0 }).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let y = tape.constant(Tensor::vector(y));
    let not_y_v = tape.constant(Tensor::vector(not_y));
    let ones = tape.constant(Tensor::filled(&[k], 1.0));

    let lp = tape.clamp_min(probs, PROB_FLOOR);
    let lp = tape.ln(lp);
    let comp = tape.sub(ones, probs)?;
    let lq = tape.clamp_min(comp, PROB_FLOOR);
    let lq = tape.ln(lq);
    let a = tape.dot(y, lp)?;
    let b = tape.dot(not_y_v, lq)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, -1.0))
}

/// Output of [`forward_patient`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub probs: Var,
    pub loss: Var,
    pub hidden: Var,
    pub trace: Option<AttentionTrace>,
}

/// Runs the whole model over one patient's visits.
pub fn forward_patient(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    ablation: &AblationConfig,
    record: &PreparedRecord,
    keep_trace: bool,
) -> Result<Forward> {
    if record.visits.is_empty() {
        return Err(Error::Config(format!("patient {} has no visits", record.patient_id)));
    }
    let mut h = tape.constant(Tensor::zeros(&[cfg.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[cfg.hidden]));
    let mut trace = keep_trace.then(Vec::new);
    for visit in &record.visits {
        let f = visit_features(tape, p, cfg, visit)?;
        let att = attend(tape, &f, c, visit.delta, &p.attention, ablation)?;
        if let Some(tr) = trace.as_mut() {
            tr.push(VisitTrace::capture(tape, &att, visit.delta, &visit.codes));
        }
        let x = attend_pool(tape, &f, att.alpha_u, att.alpha_v)?;
        (h, c) = lstm_step(tape, x, h, c, &p.lstm)?;
    }
    let probs = head(tape, h, &p.head)?;
    let loss = loss(tape, probs, record.label)?;
    Ok(Forward {
        probs,
        loss,
        hidden: h,
        trace,
    })
}

/// Parameters plus the configuration needed to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: AblationConfig,
    pub params: ModelParams,
}

/// Frozen-parameter prediction for one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub loss: f64,
    pub trace: AttentionTrace,
}

impl Model {
    pub fn new(config: ModelConfig, ablation: AblationConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self {
            config,
            ablation,
            params,
        })
    }

    pub fn predict(&self, record: &PreparedRecord) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, false);
        let out = forward_patient(&mut tape, &p, &self.config, &self.ablation, record, true)?;
        Ok(Prediction {
            probs: tape.value(out.probs).data().to_vec(),
            loss: tape.value(out.loss).item(),
            trace: out.trace.unwrap_or_default(),
        })
    }

    pub fn loss(&self, record: &PreparedRecord) -> Result<f64> {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, false);
        let out = forward_patient(&mut tape, &p, &self.config, &self.ablation, record, false)?;
        Ok(tape.value(out.loss).item())
    }

    /// Loss and its gradient, one flat vector per parameter in
    /// [`ModelParams::leaves`] order.
    pub fn loss_and_grads(&self, record: &PreparedRecord) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, true);
        let out = forward_patient(&mut tape, &p, &self.config, &self.ablation, record, false)?;
        tape.backward(out.loss)?;
        let grads = p
            .leaves()
            .into_iter()
            .map(|&v| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec)
            })
            .collect();
        Ok((tape.value(out.loss).item(), grads))
    }
}
