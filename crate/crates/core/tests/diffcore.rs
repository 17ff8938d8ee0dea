use mvpr_core::diffcore::ops::{GemPool, L2Normalize, LayerNorm, Linear, SingleHeadAttention};
use mvpr_core::diffcore::{fd_check, AdamConfig, ParamStore, Primitive, Tensor2};
mod common;

use common::{case, randn, PRIMITIVES};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn every_primitive_passes_fd_over_twenty_seeds() {
    for name in PRIMITIVES {
        for seed in 0..20 {
            let (prim, params, input) = case(name, seed);
            let err = fd_check(prim.as_ref(), &params, &input, H).unwrap();
            assert!(err <= TOL, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn fd_detects_a_wrong_gradient() {
    struct Broken;
    impl Primitive for Broken {
        fn name(&self) -> &'static str {
            "broken"
        }
        fn forward(&self, x: &Tensor2, _: &[Tensor2]) -> mvpr_core::Result<Tensor2> {
            Ok(x.map(|v| v * v))
        }
        fn backward(&self, x: &Tensor2, _: &[Tensor2], up: &Tensor2) -> mvpr_core::Result<mvpr_core::diffcore::Gradients> {
            // off by a factor of 2
            let g = Tensor2::from_vec(x.rows(), x.cols(), x.data().iter().zip(up.data()).map(|(a, u)| a * u).collect())?;
            Ok(mvpr_core::diffcore::Gradients { input: g, params: Vec::new() })
        }
    }
    let x = Tensor2::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
    assert!(fd_check(&Broken, &[], &x, H).unwrap() > 0.1);
    assert!(fd_check(&Broken, &[], &x, 1.0).is_err());
}

#[test]
fn wrong_shapes_are_errors_not_panics() {
    let x = Tensor2::zeros(2, 3);
    assert!(Linear.forward(&x, &[Tensor2::zeros(4, 2), Tensor2::zeros(1, 2)]).is_err());
    assert!(Linear.forward(&x, &[Tensor2::zeros(3, 2)]).is_err());
    assert!(SingleHeadAttention.forward(&x, &[Tensor2::zeros(3, 3)]).is_err());
    assert!(GemPool::default().forward(&x, &[]).is_err());
}

#[test]
fn adam_first_step_moves_by_lr() {
    // With bias correction the first Adam step is lr·sign(g) up to eps.
    let mut store = ParamStore::new();
    let slot = store.insert("w", Tensor2::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), true).unwrap();
    store.accumulate(slot, &Tensor2::from_vec(1, 3, vec![0.5, -4.0, 0.0]).unwrap()).unwrap();
    store.adam_step(0.1, AdamConfig::default()).unwrap();
    let v = store.value(slot).data().to_vec();
    assert!((v[0] - 0.9).abs() < 1e-6);
    assert!((v[1] - 2.1).abs() < 1e-6);
    assert_eq!(v[2], 3.0);
    assert_eq!(store.step(), 1);
}

#[test]
fn frozen_params_do_not_move() {
    let mut store = ParamStore::new();
    let slot = store.insert("frozen", Tensor2::scalar(1.0), false).unwrap();
    store.accumulate(slot, &Tensor2::scalar(5.0)).unwrap();
    store.adam_step(0.1, AdamConfig::default()).unwrap();
    assert_eq!(store.value(slot).data(), &[1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn l2_output_is_unit(seed in 0u64..10_000, t in 1usize..6, d in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, t, d, 3.0);
        let y = L2Normalize.forward(&x, &[]).unwrap();
        for r in 0..t {
            let n: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gem_lies_between_mean_and_max(seed in 0u64..10_000, p in 1.0f64..8.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, 5, 4, 1.0).map(|v| 0.1 + v.abs());
        let y = GemPool::default().forward(&x, &[Tensor2::scalar(p)]).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..5).map(|r| x.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 5.0;
            let max = col.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!(y.get(0, c) >= mean - 1e-12 && y.get(0, c) <= max + 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(seed in 0u64..10_000, d in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, 3, d, 4.0);
        let y = LayerNorm::default().forward(&x, &[Tensor2::from_vec(1, d, vec![1.0; d]).unwrap(), Tensor2::zeros(1, d)]).unwrap();
        for r in 0..3 {
            let mean = y.row(r).iter().sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}
