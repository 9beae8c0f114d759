//! Node attribution against an explicit coalition-enumeration oracle, and
//! the prior/attribution graph blend.

use cstp::causal_graph::{estimate_shap, hybrid, HybridGraph, ShapConfig, ShapMethod};
use cstp::{Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A nonlinear toy predictor `[B, T, N, 1] → [B, 1, N, 1]` with cross-node
/// interactions: `y_j = tanh(Σ_i c_ij·x̄_i) + x̄_j·x̄_{j+1}` where `x̄` is the
/// time mean.
fn toy(coef: &[f64], nodes: usize) -> impl Fn(&Tensor) -> Result<Tensor> + Sync + '_ {
    move |x: &Tensor| {
        let s = x.shape();
        let (b, t) = (s[0], s[1]);
        let mut out = Vec::with_capacity(b * nodes);
        for bi in 0..b {
            let mean: Vec<f64> = (0..nodes)
                .map(|n| (0..t).map(|ti| x.at(&[bi, ti, n, 0])).sum::<f64>() / t as f64)
                .collect();
            for j in 0..nodes {
                let lin: f64 = (0..nodes).map(|i| coef[i * nodes + j] * mean[i]).sum();
                out.push(lin.tanh() + mean[j] * mean[(j + 1) % nodes]);
            }
        }
        Tensor::new(vec![b, 1, nodes, 1], out)
    }
}

/// Exact Shapley values by enumerating every coalition. Absent nodes take
/// the background mean; the value of a coalition is the batch-mean output.
fn oracle<F: Fn(&Tensor) -> Result<Tensor>>(f: &F, inputs: &Tensor, background: &Tensor) -> Vec<f64> {
    let s = inputs.shape().to_vec();
    let (b, t, n) = (s[0], s[1], s[2]);
    let bb = background.shape()[0];
    let value = |mask: usize| -> Vec<f64> {
        let mut x = inputs.clone();
        for node in (0..n).filter(|k| mask & (1 << k) == 0) {
            for ti in 0..t {
                let m = (0..bb).map(|bi| background.at(&[bi, ti, node, 0])).sum::<f64>() / bb as f64;
                for bi in 0..b {
                    x.set(&[bi, ti, node, 0], m);
                }
            }
        }
        let y = f(&x).unwrap();
        (0..n).map(|j| (0..b).map(|bi| y.at(&[bi, 0, j, 0])).sum::<f64>() / b as f64).collect()
    };
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    let mut phi = vec![0.0; n * n];
    for i in 0..n {
        for mask in 0..(1usize << n) {
            if mask & (1 << i) != 0 {
                continue;
            }
            let size = mask.count_ones() as usize;
            let w = fact(size) * fact(n - size - 1) / fact(n);
            let (with, without) = (value(mask | (1 << i)), value(mask));
            for j in 0..n {
                phi[i * n + j] += w * (with[j] - without[j]);
            }
        }
    }
    phi
}

fn cfg(method: ShapMethod, samples: usize, seed: u64) -> ShapConfig {
    ShapConfig {
        method,
        samples,
        seed,
        ..Default::default()
    }
}

#[test]
fn additive_model_is_exact_for_any_sample_count() {
    let n = 4;
    let coef: Vec<f64> = Tensor::randn(vec![n * n], 1.0, &mut rng(0)).into_data();
    let linear = |x: &Tensor| -> Result<Tensor> {
        let b = x.shape()[0];
        let mut out = Vec::new();
        for bi in 0..b {
            for j in 0..n {
                out.push((0..n).map(|i| coef[i * n + j] * x.at(&[bi, 0, i, 0])).sum());
            }
        }
        Tensor::new(vec![b, 1, n, 1], out)
    };
    let inputs = Tensor::randn(vec![3, 1, n, 1], 1.0, &mut rng(1));
    let background = Tensor::randn(vec![5, 1, n, 1], 1.0, &mut rng(2));
    let att = estimate_shap(linear, &inputs, &background, &cfg(ShapMethod::Sampled, 3, 9)).unwrap();
    for i in 0..n {
        let xi = (0..3).map(|b| inputs.at(&[b, 0, i, 0])).sum::<f64>() / 3.0;
        let bi = (0..5).map(|b| background.at(&[b, 0, i, 0])).sum::<f64>() / 5.0;
        for j in 0..n {
            assert!((att.raw.at(&[i, j]) - coef[i * n + j] * (xi - bi)).abs() < 1e-12);
        }
    }
}

#[test]
fn exhaustive_method_matches_enumeration_oracle() {
    let n = 4;
    let coef: Vec<f64> = Tensor::randn(vec![n * n], 0.8, &mut rng(3)).into_data();
    let f = toy(&coef, n);
    let inputs = Tensor::randn(vec![2, 3, n, 1], 1.0, &mut rng(4));
    let background = Tensor::randn(vec![4, 3, n, 1], 1.0, &mut rng(5));
    let att = estimate_shap(&f, &inputs, &background, &cfg(ShapMethod::Exhaustive, 0, 0)).unwrap();
    let expect = oracle(&f, &inputs, &background);
    for (a, e) in att.raw.data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn three_node_sampled_estimate_is_close() {
    let n = 3;
    let coef: Vec<f64> = Tensor::randn(vec![n * n], 0.8, &mut rng(6)).into_data();
    let f = toy(&coef, n);
    let inputs = Tensor::randn(vec![2, 2, n, 1], 1.0, &mut rng(7));
    let background = Tensor::randn(vec![3, 2, n, 1], 1.0, &mut rng(8));
    let att = estimate_shap(&f, &inputs, &background, &cfg(ShapMethod::Sampled, 2000, 1)).unwrap();
    let expect = oracle(&f, &inputs, &background);
    let err = att.raw.data().iter().zip(&expect).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
    assert!(err < 0.05, "max error {err}");
}

#[test]
fn seed_determinism_and_thread_independence() {
    let n = 5;
    let coef: Vec<f64> = Tensor::randn(vec![n * n], 0.8, &mut rng(9)).into_data();
    let f = toy(&coef, n);
    let inputs = Tensor::randn(vec![2, 2, n, 1], 1.0, &mut rng(10));
    let background = Tensor::randn(vec![2, 2, n, 1], 1.0, &mut rng(11));
    let one = estimate_shap(&f, &inputs, &background, &cfg(ShapMethod::Sampled, 100, 4)).unwrap();
    let again = estimate_shap(&f, &inputs, &background, &cfg(ShapMethod::Sampled, 100, 4)).unwrap();
    let threaded = estimate_shap(
        &f,
        &inputs,
        &background,
        &ShapConfig {
            threads: 3,
            ..cfg(ShapMethod::Sampled, 100, 4)
        },
    )
    .unwrap();
    let other = estimate_shap(&f, &inputs, &background, &cfg(ShapMethod::Sampled, 100, 5)).unwrap();
    assert_eq!(one, again);
    assert_eq!(one, threaded);
    assert_ne!(one.raw, other.raw);
}

#[test]
fn blend_over_the_lambda_grid() {
    let prior = Tensor::randn(vec![4, 4], 1.0, &mut rng(12)).map(f64::abs);
    let shap = Tensor::uniform(vec![4, 4], 0.0, 1.0, &mut rng(13));
    for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let a = hybrid(&prior, &shap, lambda).unwrap();
        for k in 0..16 {
            assert_eq!(a.data()[k], lambda * prior.data()[k] + (1.0 - lambda) * shap.data()[k]);
        }
    }
    assert_eq!(hybrid(&prior, &shap, 1.0).unwrap(), prior);
    assert_eq!(hybrid(&prior, &shap, 0.0).unwrap(), shap);
    assert!(hybrid(&prior, &shap, 1.5).is_err());
}

#[test]
fn moving_average_refresh() {
    let mut g = HybridGraph::new(Tensor::ones(vec![2, 2]), 0.5, 0.9, 5).unwrap();
    let fresh = Tensor::zeros(vec![2, 2]);
    assert!(!g.ema_refresh(3, &fresh).unwrap());
    assert_eq!(g.current, Tensor::ones(vec![2, 2]));
    assert!(g.ema_refresh(5, &fresh).unwrap());
    assert!(g.current.data().iter().all(|&v| (v - 0.9).abs() < 1e-15));

    let mut g = HybridGraph::new(Tensor::ones(vec![2, 2]), 0.5, 0.0, 5).unwrap();
    let fresh = Tensor::full(vec![2, 2], 0.3);
    g.ema_refresh(10, &fresh).unwrap();
    assert_eq!(g.current, fresh);
}

proptest! {
    #[test]
    fn attributions_sum_to_the_output_change(seed in any::<u64>(), n in 2usize..6) {
        // Efficiency: each column of φ sums to f(inputs) − f(background).
        let coef: Vec<f64> = Tensor::randn(vec![n * n], 0.8, &mut rng(seed)).into_data();
        let f = toy(&coef, n);
        let inputs = Tensor::randn(vec![1, 2, n, 1], 1.0, &mut rng(seed ^ 1));
        let background = Tensor::randn(vec![1, 2, n, 1], 1.0, &mut rng(seed ^ 2));
        let att = estimate_shap(&f, &inputs, &background, &cfg(ShapMethod::Sampled, 16, seed)).unwrap();
        let (full, empty) = (f(&inputs).unwrap(), f(&background).unwrap());
        for j in 0..n {
            let col: f64 = (0..n).map(|i| att.raw.at(&[i, j])).sum();
            prop_assert!((col - (full.data()[j] - empty.data()[j])).abs() < 1e-10);
        }
        prop_assert!(att.normalized.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
