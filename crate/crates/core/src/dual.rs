//! Confounder intervention on fused features, the confounder-gradient
//! penalty, branch combination, and the training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{CstpError, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::tensor::Tensor;

/// Parameters of `x̂ = x + x ⊙ W ⊙ (α₁·h(S) + α₂·p(E) + α₃·q(C))`.
///
/// `S` is a learned per-node latent `[N, d_s]`; `h`, `p`, `q` are tanh
/// perceptrons with one hidden layer mapping to the fused width.
#[derive(Clone, Debug)]
pub struct Intervention {
    pub latent: String,
    pub weight: String,
    /// `[3]`: the three mixing scalars.
    pub alphas: String,
    pub h: Mlp,
    pub p: Mlp,
    pub q: Mlp,
    pub fused_width: usize,
}

impl Intervention {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        nodes: usize,
        latent_width: usize,
        width: usize,
        alpha_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if nodes == 0 || latent_width == 0 || width == 0 {
            return Err(CstpError::invalid("intervention extents must be >= 1"));
        }
        let fused = 3 * width;
        let hidden = 2 * fused;
        let latent = format!("{name}.latent");
        store.insert(latent.clone(), Tensor::randn(vec![nodes, latent_width], 1.0, rng))?;
        let weight = format!("{name}.weight");
        store.insert(weight.clone(), Tensor::ones(vec![fused]))?;
        let alphas = format!("{name}.alphas");
        store.insert(alphas.clone(), Tensor::full(vec![3], alpha_init))?;
        Ok(Intervention {
            latent,
            weight,
            alphas,
            h: Mlp::init(store, &format!("{name}.h"), latent_width, hidden, fused, Activation::Tanh, rng)?,
            p: Mlp::init(store, &format!("{name}.p"), width, hidden, fused, Activation::Tanh, rng)?,
            q: Mlp::init(store, &format!("{name}.q"), width, hidden, fused, Activation::Tanh, rng)?,
            fused_width: fused,
        })
    }

    fn alpha(&self, g: &Graph, i: usize) -> Result<Var> {
        g.slice_last(&g.param(&self.alphas)?, i, 1)
    }

    fn check(&self, fused: &Var, image_att: &Var, text_att: &Var) -> Result<()> {
        let fs = fused.shape();
        let ok = fs.len() >= 2
            && fs[fs.len() - 1] == self.fused_width
            && image_att.shape()[..image_att.shape().len() - 1] == fs[..fs.len() - 1]
            && text_att.shape()[..text_att.shape().len() - 1] == fs[..fs.len() - 1]
            && 3 * image_att.value().last_dim() == self.fused_width
            && 3 * text_att.value().last_dim() == self.fused_width;
        if !ok {
            return Err(CstpError::shape(format!(
                "intervention: fused {:?}, image attention {:?}, text attention {:?}",
                fs,
                image_att.shape(),
                text_att.shape()
            )));
        }
        Ok(())
    }

    /// `fused: [.., N, 3d]`, `image_att`, `text_att`: `[.., N, d]`.
    pub fn forward(&self, g: &Graph, fused: &Var, image_att: &Var, text_att: &Var) -> Result<Var> {
        self.check(fused, image_att, text_att)?;
        let hs = self.h.forward(g, &g.param(&self.latent)?)?;
        let pe = self.p.forward(g, image_att)?;
        let qc = self.q.forward(g, text_att)?;
        let mix = g.add(
            &g.mul(&pe, &self.alpha(g, 1)?)?,
            &g.mul(&qc, &self.alpha(g, 2)?)?,
        )?;
        // h(S) is [N, 3d] and broadcasts over the leading axes.
        let mix = g.add(&mix, &g.mul(&hs, &self.alpha(g, 0)?)?)?;
        let scaled = g.mul(&g.mul(fused, &mix)?, &g.param(&self.weight)?)?;
        g.add(fused, &scaled)
    }

    /// `J[n, m, k] = ∂h(S)[n, k] / ∂S[n, m]` as a differentiable `[N, d_s, 3d]`
    /// tensor: `Σ_j W₁[m, j]·(1 − a[n, j]²)·W₂[j, k]` with `a` the hidden
    /// activations.
    pub fn latent_jacobian(&self, g: &Graph) -> Result<Var> {
        let latent = g.param(&self.latent)?;
        let (n, ds) = (latent.shape()[0], latent.shape()[1]);
        let w1 = g.param(&self.h.hidden.weight)?;
        let w2 = g.param(&self.h.out.weight)?;
        let a = g.tanh(&self.h.hidden.forward(g, &latent)?);
        let slope = g.add_scalar(&g.scale(&g.square(&a), -1.0), 1.0);
        let hidden = slope.shape()[1];
        let slope = g.repeat_axis(&g.reshape(&slope, vec![n, 1, hidden])?, 1, ds)?;
        let w1 = g.repeat_axis(&g.reshape(&w1, vec![1, ds, hidden])?, 0, n)?;
        g.matmul(&g.mul(&w1, &slope)?, &w2)
    }

    /// `∂x̂[.., n, k] / ∂S[n, m] = x[.., n, k]·W[k]·α₁·J[n, m, k]`, returned as
    /// `[.., N, d_s, 3d]`. Entries for `S` rows of other nodes are zero and
    /// not materialised.
    pub fn latent_sensitivity(&self, g: &Graph, fused: &Var) -> Result<Var> {
        let jac = self.latent_jacobian(g)?;
        let coef = g.mul(&g.mul(fused, &g.param(&self.weight)?)?, &self.alpha(g, 0)?)?;
        let s = coef.shape().to_vec();
        let ds = jac.shape()[1];
        let mut unsq = s.clone();
        unsq.insert(s.len() - 1, 1);
        let coef = g.reshape(&coef, unsq)?;
        let coef = g.repeat_axis(&coef, s.len() - 1, ds)?;
        g.mul(&coef, &jac)
    }

    /// Mean of the squared entries of `∂x̂/∂S` over the per-node blocks.
    pub fn penalty(&self, g: &Graph, fused: &Var) -> Result<Var> {
        let jac = self.latent_jacobian(g)?;
        let ds = jac.shape()[1] as f64;
        // Σ_m J² collapses the latent axis: [N, 3d].
        let jsq = g.sum_axis(&g.square(&jac), 1)?;
        let coef = g.mul(&g.mul(fused, &g.param(&self.weight)?)?, &self.alpha(g, 0)?)?;
        let per_entry = g.mul(&g.square(&coef), &jsq)?;
        Ok(g.scale(&g.mean(&per_entry), 1.0 / ds))
    }

    /// Mean absolute entry of `∂x̂/∂S`, for monitoring.
    pub fn mean_abs_sensitivity(&self, store: &ParamStore, fused: &Tensor) -> Result<f64> {
        let g = Graph::inference(store);
        let sens = self.latent_sensitivity(&g, &g.constant(fused.clone()))?;
        Ok(sens.value().data().iter().map(|v| v.abs()).sum::<f64>() / sens.value().numel().max(1) as f64)
    }
}

/// Two-layer perceptron over the concatenated branch outputs.
#[derive(Clone, Debug)]
pub struct BranchHeads {
    pub mlp: Mlp,
}

impl BranchHeads {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BranchHeads {
            mlp: Mlp::init(store, name, 2 * width, hidden, width, Activation::Relu, rng)?,
        })
    }

    pub fn forward(&self, g: &Graph, feat_st: &Var, feat_mm: &Var) -> Result<Var> {
        if feat_st.shape() != feat_mm.shape() {
            return Err(CstpError::shape(format!(
                "branch outputs differ: {:?} vs {:?}",
                feat_st.shape(),
                feat_mm.shape()
            )));
        }
        let concat = g.concat_last(&[feat_st, feat_mm])?;
        self.mlp.forward(g, &concat)
    }
}

/// How each prediction error is reduced to a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossNorm {
    /// Mean squared error.
    #[default]
    Mse,
    /// Euclidean norm of the error.
    Root,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) || !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(CstpError::invalid(format!(
                "need beta in [0, 1] and finite gamma >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub struct LossTerms {
    pub pred: Var,
    pub st: Var,
    pub mm: Var,
    pub all: Var,
}

fn error_norm(g: &Graph, y: &Var, y_hat: &Var, norm: LossNorm) -> Result<Var> {
    match norm {
        LossNorm::Mse => g.mse(y_hat, y),
        LossNorm::Root => {
            let d = g.sub(y_hat, y)?;
            Ok(g.sqrt_eps(&g.sum(&g.square(&d)), 1e-12))
        }
    }
}

/// `L_all = L_pred + β·L_st + (1−β)·L_mm + γ·penalty`.
pub fn compute_losses(
    g: &Graph,
    y: &Var,
    y_final: &Var,
    y_st: &Var,
    y_mm: &Var,
    weights: LossWeights,
    penalty: &Var,
    norm: LossNorm,
) -> Result<LossTerms> {
    weights.validate()?;
    for (what, v) in [("final", y_final), ("main", y_st), ("auxiliary", y_mm)] {
        if v.shape() != y.shape() {
            return Err(CstpError::shape(format!(
                "{what} prediction {:?} vs target {:?}",
                v.shape(),
                y.shape()
            )));
        }
    }
    let pred = error_norm(g, y, y_final, norm)?;
    let st = error_norm(g, y, y_st, norm)?;
    let mm = error_norm(g, y, y_mm, norm)?;
    let mut all = g.add(&pred, &g.scale(&st, weights.beta))?;
    all = g.add(&all, &g.scale(&mm, 1.0 - weights.beta))?;
    all = g.add(&all, &g.scale(penalty, weights.gamma))?;
    Ok(LossTerms { pred, st, mm, all })
}

/// Affine entry map applied to the intervened features before the
/// auxiliary encoder.
pub fn entry_projection<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) -> Result<Linear> {
    Linear::init(store, name, d_in, d_out, true, rng)
}
