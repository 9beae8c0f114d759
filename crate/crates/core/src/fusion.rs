//! Cross-modal attention from the series stream to the text and image
//! streams, followed by a learned elementwise fusion gate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{attention_probabilities, Graph, ParamStore, Var};
use crate::error::{CstpError, Result};
use crate::nn::Linear;
use crate::tensor::Tensor;

/// Which axis the series queries attend over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionAxis {
    /// Nodes attend to nodes within each time step.
    Node,
    /// Time steps attend to time steps within each node.
    Time,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub width: usize,
    pub heads: usize,
    pub axis: AttentionAxis,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            width: 32,
            heads: 4,
            axis: AttentionAxis::Node,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(CstpError::invalid(format!(
                "fusion width {} must be a positive multiple of the head count {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Independent affine maps bringing each modality to the shared width.
#[derive(Clone, Debug)]
pub struct ModalityProjections {
    pub st: Linear,
    pub text: Linear,
    pub image: Linear,
}

impl ModalityProjections {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: (usize, usize, usize),
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ModalityProjections {
            st: Linear::init(store, &format!("{name}.st"), widths.0, d, true, rng)?,
            text: Linear::init(store, &format!("{name}.text"), widths.1, d, true, rng)?,
            image: Linear::init(store, &format!("{name}.image"), widths.2, d, true, rng)?,
        })
    }

    pub fn forward(&self, g: &Graph, st: &Var, text: &Var, image: &Var) -> Result<(Var, Var, Var)> {
        Ok((
            self.st.forward(g, st)?,
            self.text.forward(g, text)?,
            self.image.forward(g, image)?,
        ))
    }
}

/// Multi-head cross-modal attention with query, key, value and output maps.
#[derive(Clone, Debug)]
pub struct Cma {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub axis: AttentionAxis,
}

/// Accepts `[T, N, d]` or `[B, T, N, d]`; returns the rank-4 view and
/// whether a batch axis was added.
fn batched(g: &Graph, x: &Var) -> Result<(Var, bool)> {
    match x.shape().len() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            Ok((g.reshape(x, s)?, true))
        }
        4 => Ok((x.clone(), false)),
        _ => Err(CstpError::shape(format!("expected [T, N, d] or [B, T, N, d], got {:?}", x.shape()))),
    }
}

impl Cma {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        Ok(Cma {
            query: Linear::init(store, &format!("{name}.query"), d, d, true, rng)?,
            key: Linear::init(store, &format!("{name}.key"), d, d, true, rng)?,
            value: Linear::init(store, &format!("{name}.value"), d, d, true, rng)?,
            output: Linear::init(store, &format!("{name}.output"), d, d, true, rng)?,
            heads: config.heads,
            axis: config.axis,
        })
    }

    /// Rearranges `[B, T, N, d]` into the `[outer, L, mid, d]` layout that
    /// attends along `L`.
    fn to_attention_layout(&self, g: &Graph, x: &Var) -> Result<Var> {
        let s = x.shape();
        match self.axis {
            AttentionAxis::Node => g.reshape(x, vec![s[0] * s[1], s[2], 1, s[3]]),
            AttentionAxis::Time => Ok(x.clone()),
        }
    }

    pub fn forward(&self, g: &Graph, query_feats: &Var, kv_feats: &Var) -> Result<Var> {
        if query_feats.shape() != kv_feats.shape() {
            return Err(CstpError::shape(format!(
                "cross-modal attention: query {:?} vs key/value {:?}",
                query_feats.shape(),
                kv_feats.shape()
            )));
        }
        let (q_in, added) = batched(g, query_feats)?;
        let (kv_in, _) = batched(g, kv_feats)?;
        let shape = q_in.shape().to_vec();
        let q = self.to_attention_layout(g, &self.query.forward(g, &q_in)?)?;
        let k = self.to_attention_layout(g, &self.key.forward(g, &kv_in)?)?;
        let v = self.to_attention_layout(g, &self.value.forward(g, &kv_in)?)?;
        let att = g.attend(&q, &k, &v, self.heads)?;
        let att = g.reshape(&att, shape)?;
        let out = self.output.forward(g, &att)?;
        if added {
            g.reshape(&out, query_feats.shape().to_vec())
        } else {
            Ok(out)
        }
    }

    /// Attention probabilities `[outer, mid, H, L, L]` for inspection.
    pub fn weights(&self, store: &ParamStore, query_feats: &Tensor, kv_feats: &Tensor) -> Result<Tensor> {
        let g = Graph::inference(store);
        let (q_in, _) = batched(&g, &g.constant(query_feats.clone()))?;
        let (kv_in, _) = batched(&g, &g.constant(kv_feats.clone()))?;
        let q = self.to_attention_layout(&g, &self.query.forward(&g, &q_in)?)?;
        let k = self.to_attention_layout(&g, &self.key.forward(&g, &kv_in)?)?;
        attention_probabilities(q.value(), k.value(), self.heads)
    }
}

/// Logistic gate over the concatenated `3d` features.
#[derive(Clone, Debug)]
pub struct FusionGate {
    pub linear: Linear,
}

impl FusionGate {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        Ok(FusionGate {
            linear: Linear::init(store, name, width, width, true, rng)?,
        })
    }

    pub fn gates(&self, g: &Graph, concat: &Var) -> Result<Var> {
        Ok(g.sigmoid(&self.linear.forward(g, concat)?))
    }

    /// `concat ⊙ gates(concat)`.
    pub fn fuse(&self, g: &Graph, parts: &[&Var]) -> Result<Var> {
        let concat = g.concat_last(parts)?;
        let gates = self.gates(g, &concat)?;
        g.mul(&concat, &gates)
    }
}

/// Projections, the two cross-modal attention blocks and the gate.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub projections: ModalityProjections,
    pub text_attention: Cma,
    pub image_attention: Cma,
    pub gate: FusionGate,
}

/// Intermediate tensors of one fusion pass.
pub struct FusionOutput {
    pub st: Var,
    pub text_attention: Var,
    pub image_attention: Var,
    pub fused: Var,
}

impl Fusion {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &FusionConfig,
        widths: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        Ok(Fusion {
            config: config.clone(),
            projections: ModalityProjections::init(store, &format!("{name}.proj"), widths, d, rng)?,
            text_attention: Cma::init(store, &format!("{name}.cma_text"), config, rng)?,
            image_attention: Cma::init(store, &format!("{name}.cma_image"), config, rng)?,
            gate: FusionGate::init(store, &format!("{name}.gate"), 3 * d, rng)?,
        })
    }

    /// Inputs are `[.., T, N, width]` per modality; output `[.., T, N, 3d]`.
    pub fn forward(&self, g: &Graph, st: &Var, text: &Var, image: &Var) -> Result<FusionOutput> {
        let (st, text, image) = self.projections.forward(g, st, text, image)?;
        let text_attention = self.text_attention.forward(g, &st, &text)?;
        let image_attention = self.image_attention.forward(g, &st, &image)?;
        let fused = self.gate.fuse(g, &[&st, &text_attention, &image_attention])?;
        Ok(FusionOutput {
            st,
            text_attention,
            image_attention,
            fused,
        })
    }
}
