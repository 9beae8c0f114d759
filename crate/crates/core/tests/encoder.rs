//! Spatio-temporal encoder blocks against explicit scalar recurrences and
//! matrix products, plus gradient checks of a small stack.

use cstp::gradcheck::finite_diff_check;
use cstp::sted::{normalized_adjacency, Decoder, Gcn, Mamba, Sted, StedConfig, TemporalAttention, TemporalKind};
use cstp::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn softplus(v: f64) -> f64 {
    (1.0 + v.exp()).ln()
}

#[test]
fn scan_matches_unrolled_three_step_recurrence() {
    let mut store = ParamStore::new();
    let m = Mamba::init(&mut store, "m", 1, 1, 1, 1, &mut rng(0)).unwrap();
    let set = |s: &mut ParamStore, name: &str, shape: Vec<usize>, v: Vec<f64>| {
        s.set(name, Tensor::new(shape, v).unwrap()).unwrap()
    };
    // in_proj splits into the value path u and the gate path z.
    set(&mut store, &m.in_proj.weight, vec![1, 2], vec![0.8, -0.6]);
    set(&mut store, m.in_proj.bias.as_ref().unwrap(), vec![2], vec![0.1, 0.3]);
    set(&mut store, &m.conv_kernel, vec![1, 1], vec![1.2]);
    set(&mut store, &m.conv_bias, vec![1], vec![-0.05]);
    set(&mut store, &m.delta_proj.weight, vec![1, 1], vec![0.7]);
    set(&mut store, m.delta_proj.bias.as_ref().unwrap(), vec![1], vec![-0.2]);
    set(&mut store, &m.b_proj.weight, vec![1, 1], vec![0.9]);
    set(&mut store, &m.c_proj.weight, vec![1, 1], vec![-1.1]);
    set(&mut store, &m.a_log, vec![1, 1], vec![0.4]);
    set(&mut store, &m.skip, vec![1], vec![0.5]);
    set(&mut store, &m.out_proj.weight, vec![1, 1], vec![1.3]);
    set(&mut store, m.out_proj.bias.as_ref().unwrap(), vec![1], vec![0.2]);

    let xs = [0.5, -1.0, 2.0];
    let g = Graph::inference(&store);
    let x = g.constant(Tensor::new(vec![1, 3, 1, 1], xs.to_vec()).unwrap());
    let y = m.forward(&g, &x).unwrap();

    let a = -(0.4f64).exp();
    let mut h = 0.0;
    for (t, &xt) in xs.iter().enumerate() {
        let u = silu(1.2 * (0.8 * xt + 0.1) - 0.05);
        let z = -0.6 * xt + 0.3;
        let delta = softplus(0.7 * u - 0.2);
        h = (delta * a).exp() * h + delta * (0.9 * u) * u;
        let yt = ((-1.1 * u) * h + 0.5 * u) * silu(z);
        let expect = 1.3 * yt + 0.2;
        assert!((y.value().data()[t] - expect).abs() < 1e-12, "step {t}");
    }
}

#[test]
fn graph_convolution_on_a_path() {
    let mut store = ParamStore::new();
    let gcn = Gcn::init(&mut store, "gcn", 2, &mut rng(1)).unwrap();
    let w = [[0.5, -1.0], [2.0, 0.25]];
    store
        .set(&gcn.linear.weight, Tensor::from_rows(&[w[0].to_vec(), w[1].to_vec()]))
        .unwrap();
    let adj = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
    let a_hat = normalized_adjacency(&adj).unwrap();
    let xv = [[1.0, 2.0], [-3.0, 0.5]];
    let g = Graph::inference(&store);
    let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap());
    let y = gcn.forward(&g, &x, &a_hat).unwrap();
    // Both nodes have degree 2 after self-loops, so every entry of Â is 1/2.
    for i in 0..2 {
        for k in 0..2 {
            let mut acc = 0.0;
            for j in 0..2 {
                for m in 0..2 {
                    acc += 0.5 * xv[j][m] * w[m][k];
                }
            }
            assert!((y.value().at(&[0, 0, i, k]) - acc.max(0.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn two_step_attention_by_hand() {
    let mut store = ParamStore::new();
    let att = TemporalAttention::init(&mut store, "att", 1, &mut rng(2)).unwrap();
    for (lin, w) in [(&att.query, 1.5), (&att.key, -0.5), (&att.value, 2.0)] {
        store.set(&lin.weight, Tensor::new(vec![1, 1], vec![w]).unwrap()).unwrap();
    }
    let xs = [1.0, 3.0];
    let g = Graph::inference(&store);
    let x = g.constant(Tensor::new(vec![1, 2, 1, 1], xs.to_vec()).unwrap());
    let y = att.forward(&g, &x).unwrap();
    for (t, &xq) in xs.iter().enumerate() {
        let scores: Vec<f64> = xs.iter().map(|&xk| 1.5 * xq * (-0.5 * xk)).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let expect: f64 = scores.iter().zip(&xs).map(|(s, &xv)| s.exp() / z * 2.0 * xv).sum();
        assert!((y.value().data()[t] - expect).abs() < 1e-12);
    }
}

#[test]
fn constant_sequence_gives_uniform_attention() {
    let mut store = ParamStore::new();
    let att = TemporalAttention::init(&mut store, "att", 3, &mut rng(3)).unwrap();
    let row = [0.3, -0.7, 1.1];
    let data: Vec<f64> = (0..4).flat_map(|_| row).collect();
    let g = Graph::inference(&store);
    let x = g.constant(Tensor::new(vec![1, 4, 1, 3], data).unwrap());
    let y = att.forward(&g, &x).unwrap();
    let v = att.value.forward(&g, &g.constant(Tensor::new(vec![1, 1, 1, 3], row.to_vec()).unwrap())).unwrap();
    for t in 0..4 {
        for k in 0..3 {
            assert!((y.value().at(&[0, t, 0, k]) - v.value().data()[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_one_node_hand_case() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, "dec", 2, 1, 1, 1, 1, &mut rng(4)).unwrap();
    store.set(&dec.mlp.hidden.weight, Tensor::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]])).unwrap();
    store.set(dec.mlp.hidden.bias.as_ref().unwrap(), Tensor::from_vec(vec![0.1, -0.2])).unwrap();
    store.set(&dec.mlp.out.weight, Tensor::from_rows(&[vec![3.0], vec![-1.0]])).unwrap();
    store.set(dec.mlp.out.bias.as_ref().unwrap(), Tensor::from_vec(vec![0.05])).unwrap();
    let g = Graph::inference(&store);
    let x = g.constant(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap());
    let y = dec.forward(&g, &x).unwrap();
    let h0 = (1.0 * 1.0 + 2.0 * 2.0 + 0.1f64).max(0.0);
    let h1 = (-1.0 + 2.0 * 0.5 - 0.2f64).max(0.0);
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert!((y.value().data()[0] - (3.0 * h0 - h1 + 0.05)).abs() < 1e-12);
}

#[test]
fn two_layer_stack_is_double_application() {
    let cfg = StedConfig {
        layers: 2,
        width: 3,
        state: 2,
        conv: 2,
        input_skip: true,
    };
    let mut store = ParamStore::new();
    let sted = Sted::init(&mut store, "enc", &cfg, TemporalKind::Mamba, &mut rng(5)).unwrap();
    let a_hat = normalized_adjacency(&Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
    let g = Graph::inference(&store);
    let x = g.constant(Tensor::randn(vec![2, 4, 2, 3], 1.0, &mut rng(6)));
    let stacked = sted.forward(&g, &x, &a_hat).unwrap();
    let once = sted.layers[0].forward(&g, &x, &a_hat).unwrap();
    let twice = sted.layers[1].forward(&g, &once, &a_hat).unwrap();
    assert_eq!(stacked.value(), twice.value());
}

#[test]
fn two_node_four_step_stack_gradients() {
    for kind in [TemporalKind::Mamba, TemporalKind::Attention] {
        let cfg = StedConfig {
            layers: 2,
            width: 2,
            state: 2,
            conv: 2,
            input_skip: true,
        };
        let mut store = ParamStore::new();
        let sted = Sted::init(&mut store, "enc", &cfg, kind, &mut rng(7)).unwrap();
        let dec = Decoder::init(&mut store, "dec", 4, 2, 2, 1, 1, &mut rng(8)).unwrap();
        let a_hat = normalized_adjacency(&Tensor::from_rows(&[vec![0.0, 0.6], vec![0.6, 0.0]])).unwrap();
        let x = Tensor::randn(vec![1, 4, 2, 2], 1.0, &mut rng(9));
        let target = Tensor::randn(vec![1, 2, 2, 1], 1.0, &mut rng(10));
        let err = finite_diff_check(&store, 1e-5, |g| {
            let h = sted.forward(g, &g.constant(x.clone()), &a_hat)?;
            let y = dec.forward(g, &h)?;
            g.mse(&y, &g.constant(target.clone()))
        })
        .unwrap();
        assert!(err < 1e-4, "{kind:?}: relative error {err}");
    }
}
