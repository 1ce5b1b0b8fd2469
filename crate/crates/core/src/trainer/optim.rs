use serde::{Deserialize, Serialize};

use crate::params::ModelParams;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            rho: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && (0.0..1.0).contains(&self.rho) && self.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Running mean of squared gradients, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: RmsPropConfig,
    pub sq: Vec<Vec<f64>>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: RmsPropConfig) -> Self {
        Self {
            config,
            sq: params.leaves().iter().map(|t| vec![0.0; t.len()]).collect(),
            steps: 0,
        }
    }
}

/// `s <- rho s + (1 - rho) g^2`, `p <- p - lr g / (sqrt(s) + eps)`.
///
/// Gradients are checked first; a non-finite entry aborts the step before
/// anything is modified.
pub fn rmsprop_step(params: &mut ModelParams, grads: &[Vec<f64>], state: &mut OptimizerState) -> Result<()> {
    let names = params.names();
    let mut leaves = params.leaves_mut();
    if grads.len() != leaves.len() || state.sq.len() != leaves.len() {
        return Err(Error::Config(format!(
            "{} gradients / {} accumulators for {} parameters",
            grads.len(),
            state.sq.len(),
            leaves.len()
        )));
    }
    for ((name, g), t) in names.iter().zip(grads).zip(&leaves) {
        if g.len() != t.len() {
            return Err(Error::Config(format!("gradient for {name} has length {}", g.len())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { param: name.clone() });
        }
    }
    let RmsPropConfig {
        learning_rate: lr,
        rho,
        epsilon,
    } = state.config;
    for ((t, g), s) in leaves.iter_mut().zip(grads).zip(&mut state.sq) {
        for ((p, &g), s) in t.data_mut().iter_mut().zip(g).zip(s.iter_mut()) {
            *s = rho * *s + (1.0 - rho) * g * g;
            *p -= lr * g / (s.sqrt() + epsilon);
        }
    }
    state.steps += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelConfig;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            hidden: 2,
            code_dim: 2,
            lab_dim: 2,
            conv1_channels: 1,
            n_codes: 3,
            n_indicators: 1,
            n_u_max: 2,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 0).unwrap()
    }

    fn filled(p: &ModelParams, v: f64) -> Vec<Vec<f64>> {
        p.leaves().iter().map(|t| vec![v; t.len()]).collect()
    }

    #[test]
    fn zero_gradient_decays_state_only() {
        let mut p = params();
        let before = p.clone();
        let mut st = OptimizerState::new(&p, RmsPropConfig::default());
        st.sq.iter_mut().for_each(|s| s.fill(2.0));
        let g = filled(&p, 0.0);
        rmsprop_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
        assert!(st.sq.iter().flatten().all(|&s| s == 0.9 * 2.0));
    }

    #[test]
    fn first_unit_step() {
        let mut p = params();
        let before = p.clone();
        let mut st = OptimizerState::new(&p, RmsPropConfig::default());
        let g = filled(&p, 1.0);
        rmsprop_step(&mut p, &g, &mut st).unwrap();
        let want = 0.001 / (0.1f64.sqrt() + 1e-8);
        for (a, b) in before.leaves().iter().zip(p.leaves()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(((x - y) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut p = params();
        let before = p.clone();
        let mut st = OptimizerState::new(&p, RmsPropConfig::default());
        let mut g = filled(&p, 0.5);
        let idx = p.names().iter().position(|n| n == "theta_q").unwrap();
        g[idx][0] = f64::NAN;
        match rmsprop_step(&mut p, &g, &mut st) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "theta_q"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(st.steps, 0);
    }

    #[test]
    fn identical_steps_are_identical() {
        let mut a = params();
        let mut b = params();
        let mut sa = OptimizerState::new(&a, RmsPropConfig::default());
        let mut sb = sa.clone();
        let g = filled(&a, -0.3);
        rmsprop_step(&mut a, &g, &mut sa).unwrap();
        rmsprop_step(&mut b, &g, &mut sb).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }
}
