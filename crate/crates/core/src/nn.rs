//! Small parameterised building blocks shared by the model modules.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Silu,
}

impl Activation {
    pub fn apply(self, g: &Graph, x: &Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Silu => g.silu(x),
        }
    }
}

/// Affine map over the last axis, `x·W + b`, with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Registers `{name}.weight` (std `1/√d_in`) and optionally a zero
    /// `{name}.bias`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d_in.max(1) as f64).sqrt();
        Self::init_scaled(store, name, d_in, d_out, bias, std, rng)
    }

    pub fn init_scaled<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.insert(weight.clone(), Tensor::randn(vec![d_in, d_out], std, rng))?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(b.clone(), Tensor::zeros(vec![d_out]))?;
            Some(b)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        match &self.bias {
            Some(b) => g.linear(x, &w, Some(&g.param(b)?)),
            None => g.linear(x, &w, None),
        }
    }
}

/// Two affine maps with a nonlinearity in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::init(store, &format!("{name}.hidden"), d_in, d_hidden, true, rng)?,
            out: Linear::init(store, &format!("{name}.out"), d_hidden, d_out, true, rng)?,
            activation,
        })
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        self.out.forward(g, &self.activation.apply(g, &h))
    }
}

/// Learned gain and bias for a layer normalisation over width `d`.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        store.insert(gain.clone(), Tensor::ones(vec![d]))?;
        store.insert(bias.clone(), Tensor::zeros(vec![d]))?;
        Ok(LayerNorm {
            gain,
            bias,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        g.layer_norm(x, &g.param(&self.gain)?, &g.param(&self.bias)?, self.eps)
    }
}
