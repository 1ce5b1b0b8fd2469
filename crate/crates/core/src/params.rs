//! Model dimensions, the full parameter tree, initialization and named
//! (de)serialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::autodiff::{ParamSlots, Tensor, TensorRecord};
use crate::data::DatasetConfig;
use crate::features::{CnnParams, FeatureParams};
use crate::sequence::{HeadParams, LstmParams};
use crate::{Error, Result};

/// Declares a struct of named parameter leaves, generic over the leaf type so
/// the same layout can hold tensors, tape handles or gradient buffers.
macro_rules! param_group {
    ($(#[$doc:meta])* $name:ident { $($(#[$fdoc:meta])* $field:ident),* $(,)? }) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = $crate::autodiff::Tensor> {
            $($(#[$fdoc])* pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)* }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}
pub(crate) use param_group;

/// Layer sizes. Dataset-derived fields are filled by [`ModelConfig::for_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// LSTM hidden size `d`, also the attention space.
    pub hidden: usize,
    /// Diagnosis embedding size `d_u`.
    pub code_dim: usize,
    /// Lab feature size `d_v`.
    pub lab_dim: usize,
    pub conv1_channels: usize,
    pub conv1_width: usize,
    pub conv2_width: usize,
    pub pool_width: usize,
    pub n_codes: usize,
    pub n_indicators: usize,
    pub n_u_max: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            code_dim: 64,
            lab_dim: 16,
            conv1_channels: 8,
            conv1_width: 5,
            conv2_width: 3,
            pool_width: 2,
            n_codes: 0,
            n_indicators: 0,
            n_u_max: 0,
            n_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn for_dataset(mut self, ds: &DatasetConfig) -> Self {
        self.n_codes = ds.n_codes;
        self.n_indicators = ds.n_indicators();
        self.n_u_max = ds.n_u_max;
        self.n_classes = ds.n_classes;
        self
    }

    /// Width of the LSTM input: pooled codes plus concatenated lab features.
    pub fn input_dim(&self) -> usize {
        self.code_dim + self.n_indicators * self.lab_dim
    }

    /// Hidden width of the output MLP, `d / 2`.
    pub fn head_dim(&self) -> usize {
        (self.hidden / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.hidden,
            self.code_dim,
            self.lab_dim,
            self.conv1_channels,
            self.conv1_width,
            self.conv2_width,
            self.pool_width,
            self.n_codes,
            self.n_indicators,
            self.n_u_max,
        ];
        if dims.contains(&0) || self.n_classes < 2 {
            return Err(Error::Config(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub features: FeatureParams<T>,
    pub attention: AttentionParams<T>,
    pub lstm: LstmParams<T>,
    pub head: HeadParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            features: self.features.map(f),
            attention: self.attention.map(f),
            lstm: self.lstm.map(f),
            head: self.head.map(f),
        }
    }

    /// Visits leaves in a fixed order with their checkpoint names.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.features.visit(f);
        self.attention.visit("", f);
        self.lstm.visit("lstm.", f);
        self.head.visit("", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        self.features.visit_mut(f);
        self.attention.visit_mut("", f);
        self.lstm.visit_mut("lstm.", f);
        self.head.visit_mut("", f);
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, t| out.push(t));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive shape")
    }
}

impl ModelParams {
    /// Random initialization, a pure function of `(cfg, seed)`.
    ///
    /// Attention matrices are uniform in `±1/sqrt(d)`, contraction kernels are
    /// `1/n`, and the combination weights start at `(1, 1, 1, 0)`. Other
    /// weights are uniform in `±1/sqrt(fan_in)`; the LSTM forget bias is 1.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let d = cfg.hidden;
        let att = 1.0 / (d as f64).sqrt();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        let features = FeatureParams {
            theta_e: init.uniform(&[cfg.code_dim, cfg.n_codes], 1.0),
            cnn: (0..cfg.n_indicators)
                .map(|_| {
                    let k1 = cfg.conv1_width;
                    let fan2 = cfg.conv1_channels * cfg.conv2_width;
                    CnnParams {
                        conv1_w: init.uniform(&[cfg.conv1_channels, 1, k1], fan(k1)),
                        conv1_b: init.uniform(&[cfg.conv1_channels], fan(k1)),
                        conv2_w: init.uniform(&[cfg.lab_dim, cfg.conv1_channels, cfg.conv2_width], fan(fan2)),
                        conv2_b: init.uniform(&[cfg.lab_dim], fan(fan2)),
                    }
                })
                .collect(),
        };

        let combo = || Tensor::vector(vec![1.0, 1.0, 1.0, 0.0]);
        let code_kernel = || Tensor::filled(&[cfg.n_u_max], 1.0 / cfg.n_u_max as f64);
        let lab_kernel = || Tensor::filled(&[cfg.n_indicators], 1.0 / cfg.n_indicators as f64);
        let attention = AttentionParams {
            theta_d: init.uniform(&[d, d], att),
            b_d: Tensor::zeros(&[d]),
            theta_u1: init.uniform(&[d, cfg.code_dim], att),
            theta_v1: init.uniform(&[d, cfg.lab_dim], att),
            theta_uq: init.uniform(&[d, d], att),
            theta_vq: init.uniform(&[d, d], att),
            theta_u2: init.uniform(&[d, cfg.code_dim], att),
            theta_v2: init.uniform(&[d, cfg.lab_dim], att),
            theta_u2_kernel: code_kernel(),
            theta_v2_kernel: lab_kernel(),
            theta_u3: init.uniform(&[d, cfg.code_dim], att),
            theta_v3: init.uniform(&[d, cfg.lab_dim], att),
            theta_q: init.uniform(&[d, d], att),
            theta_u3_kernel: code_kernel(),
            theta_v3_kernel: lab_kernel(),
            eta: combo(),
            epsilon: combo(),
        };

        let width = cfg.input_dim() + d;
        let gate = fan(width);
        let lstm = LstmParams {
            w_i: init.uniform(&[d, width], gate),
            w_f: init.uniform(&[d, width], gate),
            w_o: init.uniform(&[d, width], gate),
            w_g: init.uniform(&[d, width], gate),
            b_i: Tensor::zeros(&[d]),
            b_f: Tensor::filled(&[d], 1.0),
            b_o: Tensor::zeros(&[d]),
            b_g: Tensor::zeros(&[d]),
        };

        let h = cfg.head_dim();
        let head = HeadParams {
            fo_w: init.uniform(&[h, d], fan(d)),
            fo_b: Tensor::zeros(&[h]),
            theta_o: init.uniform(&[cfg.n_classes, h], fan(h)),
            b_o: Tensor::zeros(&[cfg.n_classes]),
        };

        Ok(Self {
            features,
            attention,
            lstm,
            head,
        })
    }

    pub fn to_named(&self) -> BTreeMap<String, TensorRecord> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, t| {
            out.insert(name, t.to_record());
        });
        out
    }

    /// Rebuilds parameters from named records; every key must be present
    /// with the shape implied by `cfg`, and no extra keys are allowed.
    pub fn from_named(cfg: &ModelConfig, named: &BTreeMap<String, TensorRecord>) -> Result<Self> {
        let mut params = Self::init(cfg, 0)?;
        let mut seen = 0;
        let mut failure = None;
        params.visit_mut(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            match named.get(&name) {
                Some(r) if r.shape == t.shape() => match Tensor::try_from(r.clone()) {
                    Ok(v) => {
                        *t = v;
                        seen += 1;
                    }
                    Err(e) => failure = Some(format!("{name}: {e}")),
                },
                Some(r) => {
                    failure = Some(format!("{name}: shape {:?}, expected {:?}", r.shape, t.shape()))
                }
                None => failure = Some(format!("missing parameter {name}")),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Checkpoint(msg));
        }
        if seen != named.len() {
            let known = params.names();
            let extra: Vec<_> = named.keys().filter(|k| !known.contains(k)).collect();
            return Err(Error::Checkpoint(format!("unknown parameters {extra:?}")));
        }
        Ok(params)
    }

    pub fn n_scalars(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }
}

impl ParamSlots for ModelParams {
    fn slots(&self) -> Vec<&Tensor> {
        self.leaves()
    }

    fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        self.leaves_mut()
    }
}
