use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tghoa::attention::{Ablation, AblationConfig, Decay};
use tghoa::autodiff::finite_difference;
use tghoa::features::{PreparedRecord, PreparedVisit};
use tghoa::params::{ModelConfig, ModelParams};
use tghoa::sequence::Model;

fn toy() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        code_dim: 8,
        lab_dim: 4,
        n_codes: 10,
        n_indicators: 2,
        n_u_max: 3,
        n_classes: 2,
        ..ModelConfig::default()
    }
}

fn wave(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn patient(seed: u64, n_visits: usize, cfg: &ModelConfig) -> PreparedRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let visits = (0..n_visits)
        .map(|t| {
            let n_u = rng.gen_range(1..=cfg.n_u_max);
            let mut codes = Vec::new();
            while codes.len() < n_u {
                let c = rng.gen_range(0..cfg.n_codes);
                if !codes.contains(&c) {
                    codes.push(c);
                }
            }
            PreparedVisit {
                delta: if t == 0 { 0.0 } else { rng.gen_range(0.1..8.0) },
                codes,
                waves: (0..cfg.n_indicators)
                    .map(|_| {
                        let len = rng.gen_range(1..30);
                        wave(&mut rng, len)
                    })
                    .collect(),
            }
        })
        .collect();
    PreparedRecord {
        patient_id: format!("toy{seed}"),
        label: (seed % 2) as usize,
        visits,
    }
}

fn gradient_check(ablation: AblationConfig, seed: u64) {
    let cfg = toy();
    let model = Model::new(cfg.clone(), ablation, seed).unwrap();
    let rec = patient(seed, 3, &cfg);
    let (_, analytic) = model.loss_and_grads(&rec).unwrap();
    let mut params = model.params.clone();
    let numeric = finite_difference(
        |p: &ModelParams| {
            let m = Model {
                config: cfg.clone(),
                ablation,
                params: p.clone(),
            };
            m.loss(&rec).unwrap()
        },
        &mut params,
        1e-5,
    );
    let names = model.params.names();
    let mut worst = 0.0f64;
    for ((name, a), n) in names.iter().zip(&analytic).zip(&numeric) {
        for (i, (a, n)) in a.iter().zip(n).enumerate() {
            let err = (a - n).abs();
            let ok = if a.abs() < 1e-6 && n.abs() < 1e-6 {
                err <= 1e-6
            } else {
                err <= 1e-4 * a.abs().max(n.abs())
            };
            assert!(ok, "{name}[{i}]: analytic {a} vs numeric {n}");
            worst = worst.max(err);
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn end_to_end_gradients_full_model() {
    gradient_check(AblationConfig::default(), 1);
    gradient_check(AblationConfig::default(), 2);
}

#[test]
fn end_to_end_gradients_every_ablation_and_decay() {
    for (i, ab) in Ablation::ALL.into_iter().enumerate() {
        gradient_check(ab.config(Decay::G3), 10 + i as u64);
    }
    for (i, d) in Decay::ALL.into_iter().enumerate() {
        gradient_check(Ablation::Tghoa.config(d), 20 + i as u64);
    }
}

#[test]
fn decay_scales_second_query_exactly() {
    let cfg = toy();
    let model = Model::new(cfg.clone(), Ablation::Tghoa.config(Decay::G2), 3).unwrap();
    let base = patient(3, 2, &cfg);
    let with_gap = |delta: f64| {
        let mut r = base.clone();
        r.visits[1].delta = delta;
        model.predict(&r).unwrap().trace
    };
    let (da, db) = (0.7, 12.0);
    let (ta, tb) = (with_gap(da), with_gap(db));
    let qa = ta[1].query.clone().unwrap();
    let qb = tb[1].query.clone().unwrap();
    assert!(qb.iter().any(|&x| x != 0.0));
    let ratio = Decay::G2.eval(da) / Decay::G2.eval(db);
    for (a, b) in qa.iter().zip(&qb) {
        assert!((a - ratio * b).abs() <= 1e-12, "{a} vs {}", ratio * b);
    }
    assert_eq!(ta[0], tb[0]);
}

#[test]
fn forward_is_a_pure_function() {
    let cfg = toy();
    let a = Model::new(cfg.clone(), AblationConfig::default(), 4).unwrap();
    let b = Model::new(cfg.clone(), AblationConfig::default(), 4).unwrap();
    let rec = patient(8, 6, &cfg);
    let pa = a.predict(&rec).unwrap();
    let pb = b.predict(&rec).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&pa.probs), bits(&pb.probs));
    assert_eq!(pa.trace, pb.trace);
}

#[test]
fn each_ablation_matches_its_unit_set() {
    let cfg = toy();
    let rec = patient(5, 3, &cfg);
    for ab in Ablation::ALL {
        let c = ab.config(Decay::G2);
        let pred = Model::new(cfg.clone(), c, 1).unwrap().predict(&rec).unwrap();
        for t in &pred.trace {
            assert_eq!(t.lambda_uq.is_some(), c.use_intra, "{ab}");
            assert_eq!(t.lambda_uv_codes.is_some(), c.use_inter, "{ab}");
            assert_eq!(t.lambda_uvq_codes.is_some(), c.use_third, "{ab}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn probabilities_and_attention_are_normalized(seed in any::<u64>(), n_visits in 1usize..6, k in 2usize..4) {
        let cfg = ModelConfig { n_classes: k, ..toy() };
        let model = Model::new(cfg.clone(), AblationConfig::default(), seed).unwrap();
        let mut rec = patient(seed, n_visits, &cfg);
        rec.label %= k;
        let pred = model.predict(&rec).unwrap();
        prop_assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(pred.probs.iter().all(|&p| p > 0.0));
        prop_assert!(pred.loss >= 0.0);
        for (t, v) in pred.trace.iter().zip(&rec.visits) {
            prop_assert!((t.alpha_u.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!((t.alpha_v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(t.alpha_u[v.codes.len()..].iter().all(|&a| a == 0.0));
        }
    }
}
