//! Spatio-temporal encoder-decoder: graph convolution for the spatial axis,
//! a gated selective state-space block for the temporal axis, residual
//! layer normalisation, and a per-node MLP decoder.
//!
//! Activations are laid out `[B, T, N, d]` throughout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{CstpError, Result};
use crate::nn::{Activation, LayerNorm, Linear, Mlp};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StedConfig {
    pub layers: usize,
    pub width: usize,
    pub state: usize,
    pub conv: usize,
    /// Add the layer input to the spatial and temporal outputs before the
    /// normalisation. Disable for the strict two-term sum.
    pub input_skip: bool,
}

impl Default for StedConfig {
    fn default() -> Self {
        StedConfig {
            layers: 3,
            width: 32,
            state: 16,
            conv: 4,
            input_skip: true,
        }
    }
}

impl StedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.state == 0 || self.conv == 0 {
            return Err(CstpError::invalid(format!(
                "encoder layers, width, state and conv must all be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn inner_width(&self) -> usize {
        2 * self.width
    }
}

/// Which sequence model mixes information along time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalKind {
    Mamba,
    Attention,
}

/// `D̃^{-1/2}(A+I)D̃^{-1/2}` for a non-negative square adjacency.
pub fn normalized_adjacency(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(CstpError::shape(format!("adjacency must be square, got {:?}", a.shape())));
    }
    if let Some(bad) = a.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(CstpError::invalid(format!(
            "adjacency entries must be finite and non-negative, found {bad}"
        )));
    }
    let n = a.shape()[0];
    let mut m = a.clone();
    for i in 0..n {
        let v = m.at(&[i, i]) + 1.0;
        m.set(&[i, i], v);
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / m.data()[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            let v = m.at(&[i, j]) * inv_sqrt[i] * inv_sqrt[j];
            m.set(&[i, j], v);
        }
    }
    Ok(m)
}

fn check_input(x: &Var, width: usize, what: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[3] != width || s[1] == 0 {
        return Err(CstpError::shape(format!(
            "{what} expects [B, T>=1, N, {width}], got {s:?}"
        )));
    }
    Ok(())
}

/// One graph convolution: `ReLU(Â·X·W + b)` at every (batch, time).
#[derive(Clone, Debug)]
pub struct Gcn {
    pub linear: Linear,
}

impl Gcn {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Gcn {
            linear: Linear::init(store, name, d, d, true, rng)?,
        })
    }

    /// `a_hat` is the already normalised adjacency.
    pub fn forward(&self, g: &Graph, x: &Var, a_hat: &Tensor) -> Result<Var> {
        check_input(x, self.linear.d_in, "graph convolution")?;
        let mixed = g.mix_axis(x, 2, a_hat)?;
        Ok(g.relu(&self.linear.forward(g, &mixed)?))
    }
}

/// Gated selective state-space block applied to every node's sequence.
#[derive(Clone, Debug)]
pub struct Mamba {
    pub in_proj: Linear,
    pub conv_kernel: String,
    pub conv_bias: String,
    pub delta_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    /// The state decay is `-exp(a_log)`, negative by construction.
    pub a_log: String,
    pub skip: String,
    pub out_proj: Linear,
    pub inner: usize,
}

impl Mamba {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        inner: usize,
        state: usize,
        conv: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let in_proj = Linear::init(store, &format!("{name}.in_proj"), d, 2 * inner, true, rng)?;
        let conv_kernel = format!("{name}.conv.kernel");
        let conv_bias = format!("{name}.conv.bias");
        store.insert(
            conv_kernel.clone(),
            Tensor::randn(vec![conv, inner], 1.0 / (conv as f64).sqrt(), rng),
        )?;
        store.insert(conv_bias.clone(), Tensor::zeros(vec![inner]))?;
        let delta_proj = Linear::init_scaled(
            store,
            &format!("{name}.delta_proj"),
            inner,
            inner,
            true,
            0.1 / (inner as f64).sqrt(),
            rng,
        )?;
        // softplus(bias) ≈ 0.1 so the initial step is short.
        store.set(
            delta_proj.bias.as_deref().unwrap(),
            Tensor::full(vec![inner], 0.1f64.exp_m1().ln()),
        )?;
        let b_proj = Linear::init(store, &format!("{name}.b_proj"), inner, state, false, rng)?;
        let c_proj = Linear::init(store, &format!("{name}.c_proj"), inner, state, false, rng)?;
        let a_log = format!("{name}.a_log");
        let decay: Vec<f64> = (0..inner)
            .flat_map(|_| (1..=state).map(|j| (j as f64).ln()))
            .collect();
        store.insert(a_log.clone(), Tensor::new(vec![inner, state], decay)?)?;
        let skip = format!("{name}.skip");
        store.insert(skip.clone(), Tensor::ones(vec![inner]))?;
        let out_proj = Linear::init(store, &format!("{name}.out_proj"), inner, d, true, rng)?;
        Ok(Mamba {
            in_proj,
            conv_kernel,
            conv_bias,
            delta_proj,
            b_proj,
            c_proj,
            a_log,
            skip,
            out_proj,
            inner,
        })
    }

    /// The diagonal state matrix `[inner, state]`.
    pub fn decay(&self, store: &ParamStore) -> Result<Tensor> {
        let a_log = store
            .get(&self.a_log)
            .ok_or_else(|| CstpError::invalid(format!("missing `{}`", self.a_log)))?;
        Ok(a_log.map(|v| -crate::kernels::exp(v)))
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        check_input(x, self.in_proj.d_in, "selective state-space block")?;
        let xz = self.in_proj.forward(g, x)?;
        let u = g.slice_last(&xz, 0, self.inner)?;
        let z = g.slice_last(&xz, self.inner, self.inner)?;
        let u = g.conv_time_depthwise(&u, &g.param(&self.conv_kernel)?, Some(&g.param(&self.conv_bias)?))?;
        let u = g.silu(&u);
        let delta = g.softplus(&self.delta_proj.forward(g, &u)?);
        let bm = self.b_proj.forward(g, &u)?;
        let cm = self.c_proj.forward(g, &u)?;
        let a = g.scale(&g.exp(&g.param(&self.a_log)?), -1.0);
        let y = g.selective_scan(&u, &delta, &bm, &cm, &a, &g.param(&self.skip)?)?;
        let y = g.mul(&y, &g.silu(&z))?;
        self.out_proj.forward(g, &y)
    }
}

/// Single-head scaled dot-product self-attention over time, per node.
/// Its cost grows quadratically with sequence length.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl TemporalAttention {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(TemporalAttention {
            query: Linear::init(store, &format!("{name}.query"), d, d, true, rng)?,
            key: Linear::init(store, &format!("{name}.key"), d, d, true, rng)?,
            value: Linear::init(store, &format!("{name}.value"), d, d, true, rng)?,
        })
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        check_input(x, self.query.d_in, "temporal attention")?;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        // [B, T, N, d]: attend along T separately for every (b, n).
        g.attend(&q, &k, &v, 1)
    }
}

#[derive(Clone, Debug)]
pub enum Temporal {
    Mamba(Mamba),
    Attention(TemporalAttention),
}

impl Temporal {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &StedConfig,
        kind: TemporalKind,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            TemporalKind::Mamba => Temporal::Mamba(Mamba::init(
                store,
                &format!("{name}.mamba"),
                config.width,
                config.inner_width(),
                config.state,
                config.conv,
                rng,
            )?),
            TemporalKind::Attention => {
                Temporal::Attention(TemporalAttention::init(store, &format!("{name}.attention"), config.width, rng)?)
            }
        })
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        match self {
            Temporal::Mamba(m) => m.forward(g, x),
            Temporal::Attention(a) => a.forward(g, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StedLayer {
    pub gcn: Gcn,
    pub temporal: Temporal,
    pub norm: LayerNorm,
    pub input_skip: bool,
}

impl StedLayer {
    pub fn forward(&self, g: &Graph, x: &Var, a_hat: &Tensor) -> Result<Var> {
        let spatial = self.gcn.forward(g, x, a_hat)?;
        let temporal = self.temporal.forward(g, x)?;
        let mut sum = g.add(&spatial, &temporal)?;
        if self.input_skip {
            sum = g.add(&sum, x)?;
        }
        self.norm.forward(g, &sum)
    }
}

/// A stack of encoder layers with distinct parameters.
#[derive(Clone, Debug)]
pub struct Sted {
    pub config: StedConfig,
    pub layers: Vec<StedLayer>,
}

impl Sted {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &StedConfig,
        kind: TemporalKind,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let prefix = format!("{name}.layer{l}");
            layers.push(StedLayer {
                gcn: Gcn::init(store, &format!("{prefix}.gcn"), config.width, rng)?,
                temporal: Temporal::init(store, &prefix, config, kind, rng)?,
                norm: LayerNorm::init(store, &format!("{prefix}.norm"), config.width)?,
                input_skip: config.input_skip,
            });
        }
        Ok(Sted {
            config: config.clone(),
            layers,
        })
    }

    pub fn forward(&self, g: &Graph, x: &Var, a_hat: &Tensor) -> Result<Var> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(g, &h, a_hat)?;
        }
        Ok(h)
    }
}

/// Per-node map from the flattened encoded history `T·d` to `S_out` future
/// steps of width `d_out`, through one ReLU hidden layer.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub t_in: usize,
    pub s_out: usize,
    pub width: usize,
    pub d_out: usize,
    pub mlp: Mlp,
}

impl Decoder {
    /// Hidden width is `hidden_mult · T · d`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        t_in: usize,
        s_out: usize,
        width: usize,
        d_out: usize,
        hidden_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if t_in == 0 || s_out == 0 || width == 0 || d_out == 0 || hidden_mult == 0 {
            return Err(CstpError::invalid("decoder extents must be >= 1"));
        }
        let flat = t_in * width;
        let mlp = Mlp::init(store, name, flat, hidden_mult * flat, s_out * d_out, Activation::Relu, rng)?;
        Ok(Decoder {
            t_in,
            s_out,
            width,
            d_out,
            mlp,
        })
    }

    /// `[B, T, N, d]` → `[B, S_out, N, d_out]`.
    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[1] != self.t_in || s[3] != self.width {
            return Err(CstpError::shape(format!(
                "decoder built for [B, {}, N, {}], got {s:?}",
                self.t_in, self.width
            )));
        }
        let (b, n) = (s[0], s[2]);
        let per_node = g.permute(x, &[0, 2, 1, 3])?;
        let flat = g.reshape(&per_node, vec![b, n, self.t_in * self.width])?;
        let out = self.mlp.forward(g, &flat)?;
        let out = g.reshape(&out, vec![b, n, self.s_out, self.d_out])?;
        g.permute(&out, &[0, 2, 1, 3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_graph_normalises_to_identity() {
        let a_hat = normalized_adjacency(&Tensor::zeros(vec![3, 3])).unwrap();
        assert_eq!(a_hat, Tensor::eye(3));
    }

    #[test]
    fn negative_adjacency_rejected() {
        let a = Tensor::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]);
        assert!(normalized_adjacency(&a).is_err());
    }

    #[test]
    fn path_graph_normalisation() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let a_hat = normalized_adjacency(&a).unwrap();
        for v in a_hat.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn initial_decay_is_minus_one_to_minus_n() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mamba::init(&mut store, "m", 4, 8, 5, 4, &mut rng).unwrap();
        let a = m.decay(&store).unwrap();
        for c in 0..8 {
            for j in 0..5 {
                assert!((a.at(&[c, j]) + (j + 1) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_rejects_wrong_history_length() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = Decoder::init(&mut store, "dec", 3, 2, 4, 1, 2, &mut rng).unwrap();
        let g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(vec![1, 4, 2, 4]));
        assert!(dec.forward(&g, &x).is_err());
    }
}
