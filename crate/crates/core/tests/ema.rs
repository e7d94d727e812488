mod support;

use phenoflow_core::autodiff::Tensor;
use phenoflow_core::model::ParamSet;
use phenoflow_core::rng::seeded;
use phenoflow_core::train::{gamma_from_sigma_rel, sigma_rel_of_gamma, EmaState};
use proptest::prelude::*;
use rand::Rng;
use support::power_average;

fn scalar(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("x", Tensor::from_vec(vec![v]));
    p
}

fn run(trace: &[f64], sigma_rel: f64) -> (f64, f64) {
    let mut ema = EmaState::new(sigma_rel, &scalar(0.0)).unwrap();
    for (i, &v) in trace.iter().enumerate() {
        ema.update(&scalar(v), i + 1).unwrap();
    }
    (ema.params.tensors()[0].data()[0], ema.gamma)
}

#[test]
fn matches_power_weighted_oracle_on_long_traces() {
    for seed in 0..10 {
        let mut rng = seeded(seed);
        let trace: Vec<f64> = (0..1000).map(|_| 3.0 + rng.random::<f64>()).collect();
        for sigma_rel in [0.01, 0.05, 0.1, 0.2] {
            let (got, gamma) = run(&trace, sigma_rel);
            let want = power_average(&trace, gamma);
            let rel = (got - want).abs() / want.abs();
            assert!(rel < 1e-10, "seed {seed} σ_rel {sigma_rel}: {rel}");
        }
    }
}

#[test]
fn gamma_for_default_sigma() {
    let g = gamma_from_sigma_rel(0.01).unwrap();
    assert!((sigma_rel_of_gamma(g) - 0.01).abs() < 1e-14);
    // Positive root of 1e-4·(γ+2)²(γ+3) − (γ+1), from numpy.roots.
    assert!((g - 96.99489782).abs() < 1e-7, "{g}");
    assert!(gamma_from_sigma_rel(0.5).is_err());
    assert!(gamma_from_sigma_rel(0.0).is_err());
}

#[test]
fn first_update_copies_live_weights() {
    let (v, _) = run(&[7.5], 0.05);
    assert_eq!(v, 7.5);
}

proptest! {
    #[test]
    fn constant_trace_is_fixed_point(c in -10.0f64..10.0, n in 1usize..200) {
        let (v, _) = run(&vec![c; n], 0.05);
        prop_assert!((v - c).abs() <= 1e-12 * (1.0 + c.abs()));
    }
}
