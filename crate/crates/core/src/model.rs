//! The dual-branch forecaster: a series-only main branch and a multi-modal
//! auxiliary branch whose fused features pass through the confounder
//! intervention, combined by a small perceptron.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{ImageEncoder, TextEncoder};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::dual::{entry_projection, BranchHeads, Intervention};
use crate::error::{CstpError, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::nn::Linear;
use crate::sted::{Decoder, Sted, StedConfig, TemporalKind};
use crate::tensor::Tensor;

/// Which parts of the model take part in training and prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelMode {
    /// Both branches, intervention and penalty.
    #[default]
    Full,
    /// The series branch alone; its output is the final prediction.
    MainOnly,
    /// Both branches, with the fused features entering the auxiliary
    /// encoder unchanged.
    NoIntervention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub nodes: usize,
    /// Series channels.
    pub channels: usize,
    pub t_in: usize,
    pub s_out: usize,
    pub sted: StedConfig,
    pub temporal: TemporalKind,
    pub fusion_heads: usize,
    pub fusion_axis: crate::fusion::AttentionAxis,
    pub text_vocab: usize,
    pub text_width: usize,
    pub image_channels: usize,
    pub image_width: usize,
    pub latent_width: usize,
    pub alpha_init: f64,
    pub head_hidden: usize,
    pub decoder_hidden_mult: usize,
    pub mode: ModelMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.sted.validate()?;
        self.fusion().validate()?;
        let dims = [
            ("nodes", self.nodes),
            ("channels", self.channels),
            ("t_in", self.t_in),
            ("s_out", self.s_out),
            ("text_vocab", self.text_vocab),
            ("text_width", self.text_width),
            ("image_channels", self.image_channels),
            ("image_width", self.image_width),
            ("latent_width", self.latent_width),
            ("head_hidden", self.head_hidden),
            ("decoder_hidden_mult", self.decoder_hidden_mult),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(CstpError::invalid(format!("model setting {name} must be >= 1")));
        }
        if !self.alpha_init.is_finite() {
            return Err(CstpError::invalid("alpha_init must be finite"));
        }
        Ok(())
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            width: self.sted.width,
            heads: self.fusion_heads,
            axis: self.fusion_axis,
        }
    }
}

/// One mini-batch of windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Normalised input window `[B, T_in, N, c]`.
    pub x: Tensor,
    /// Normalised targets `[B, S_out, N, c]`.
    pub y: Tensor,
    /// Summed hashed token counts of the text aligned to each input step,
    /// `[B, T_in, V]`.
    pub text_counts: Tensor,
    /// Number of text observations aligned to each input step, `[B, T_in, 1]`.
    pub text_obs: Tensor,
    /// Images aligned to the window, `[K, H, W, c]`.
    pub images: Option<Tensor>,
    /// Row `(b·T_in + t)·N + n` each image is matched to.
    pub image_rows: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.x.shape()[0]
    }
}

/// Predictions of one forward pass.
pub struct ForwardOutput {
    pub y_final: Var,
    pub y_st: Var,
    /// Absent in [`ModelMode::MainOnly`].
    pub y_mm: Option<Var>,
    /// Fused features before the intervention.
    pub fused: Option<Var>,
    /// Confounder penalty; zero unless the intervention is active.
    pub penalty: Var,
}

/// Multi-modal parts of the model.
#[derive(Clone, Debug)]
pub struct AuxBranch {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub fusion: Fusion,
    pub entry: Linear,
    pub sted: Sted,
    pub decoder: Decoder,
    pub heads: BranchHeads,
    pub intervention: Option<Intervention>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub main_entry: Linear,
    pub main_sted: Sted,
    pub main_decoder: Decoder,
    pub aux: Option<AuxBranch>,
}

impl Model {
    /// Registers every parameter in `store`. The series branch is created
    /// first so it starts from the same weights in every mode.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.sted.width;
        let main_entry = Linear::init(store, "main.entry", c.channels, d, true, rng)?;
        let main_sted = Sted::init(store, "main.sted", &c.sted, c.temporal, rng)?;
        let main_decoder = Decoder::init(store, "main.decoder", c.t_in, c.s_out, d, c.channels, c.decoder_hidden_mult, rng)?;
        let aux = if c.mode == ModelMode::MainOnly {
            None
        } else {
            let text = TextEncoder::init(store, "aux.text", c.text_vocab, c.text_width, rng)?;
            let image = ImageEncoder::init(store, "aux.image", c.image_channels, c.image_width, rng)?;
            let fusion = Fusion::init(
                store,
                "aux.fusion",
                &c.fusion(),
                (c.channels, c.text_width, c.image_width),
                rng,
            )?;
            let entry = entry_projection(store, "aux.entry", 3 * d, d, rng)?;
            let sted = Sted::init(store, "aux.sted", &c.sted, c.temporal, rng)?;
            let decoder = Decoder::init(store, "aux.decoder", c.t_in, c.s_out, d, c.channels, c.decoder_hidden_mult, rng)?;
            let heads = BranchHeads::init(store, "heads", c.channels, c.head_hidden, rng)?;
            let intervention = if c.mode == ModelMode::Full {
                Some(Intervention::init(store, "intervention", c.nodes, c.latent_width, d, c.alpha_init, rng)?)
            } else {
                None
            };
            Some(AuxBranch {
                text,
                image,
                fusion,
                entry,
                sted,
                decoder,
                heads,
                intervention,
            })
        };
        Ok(Model {
            config: config.clone(),
            main_entry,
            main_sted,
            main_decoder,
            aux,
        })
    }

    fn check_series(&self, x: &Var) -> Result<()> {
        let c = &self.config;
        let s = x.shape();
        if s.len() != 4 || s[1] != c.t_in || s[2] != c.nodes || s[3] != c.channels {
            return Err(CstpError::shape(format!(
                "model expects inputs [B, {}, {}, {}], got {s:?}",
                c.t_in, c.nodes, c.channels
            )));
        }
        Ok(())
    }

    /// Series branch: `[B, T_in, N, c]` → `[B, S_out, N, c]`.
    pub fn forward_main(&self, g: &Graph, x: &Var, a_hat: &Tensor) -> Result<Var> {
        self.check_series(x)?;
        let h = self.main_entry.forward(g, x)?;
        let h = self.main_sted.forward(g, &h, a_hat)?;
        self.main_decoder.forward(g, &h)
    }

    /// Series-branch predictions without gradient tracking.
    pub fn predict_main(&self, store: &ParamStore, x: &Tensor, a_hat: &Tensor) -> Result<Tensor> {
        let g = Graph::inference(store);
        Ok(self.forward_main(&g, &g.constant(x.clone()), a_hat)?.to_tensor())
    }

    fn aux_inputs(&self, g: &Graph, aux: &AuxBranch, batch: &Batch) -> Result<(Var, Var)> {
        let c = &self.config;
        let b = batch.size();
        let (t, n) = (c.t_in, c.nodes);
        let ts = batch.text_counts.shape();
        if ts != [b, t, c.text_vocab] || batch.text_obs.shape() != [b, t, 1] {
            return Err(CstpError::shape(format!(
                "text counts {ts:?} / observation counts {:?} do not match a [{b}, {t}, {}] window",
                batch.text_obs.shape(),
                c.text_vocab
            )));
        }
        let text = aux.text.forward_aligned(
            g,
            &g.constant(batch.text_counts.clone()),
            &g.constant(batch.text_obs.clone()),
        )?;
        let text = g.reshape(&text, vec![b, t, 1, c.text_width])?;
        let text = g.repeat_axis(&text, 2, n)?;
        let image = match &batch.images {
            Some(px) if px.shape()[0] > 0 => {
                if px.shape()[0] != batch.image_rows.len() {
                    return Err(CstpError::shape(format!(
                        "{} images but {} slot indices",
                        px.shape()[0],
                        batch.image_rows.len()
                    )));
                }
                let feats = aux.image.forward(g, &g.constant(px.clone()))?;
                let flat = g.scatter_rows(&feats, &batch.image_rows, b * t * n)?;
                g.reshape(&flat, vec![b, t, n, c.image_width])?
            }
            _ => g.constant(Tensor::zeros(vec![b, t, n, c.image_width])),
        };
        Ok((text, image))
    }

    pub fn forward(&self, g: &Graph, batch: &Batch, a_hat: &Tensor) -> Result<ForwardOutput> {
        let x = g.constant(batch.x.clone());
        let y_st = self.forward_main(g, &x, a_hat)?;
        let Some(aux) = &self.aux else {
            return Ok(ForwardOutput {
                y_final: y_st.clone(),
                y_st,
                y_mm: None,
                fused: None,
                penalty: g.constant(Tensor::scalar(0.0)),
            });
        };
        let (text, image) = self.aux_inputs(g, aux, batch)?;
        let fo = aux.fusion.forward(g, &x, &text, &image)?;
        let (features, penalty) = match &aux.intervention {
            Some(iv) => (
                iv.forward(g, &fo.fused, &fo.image_attention, &fo.text_attention)?,
                iv.penalty(g, &fo.fused)?,
            ),
            None => (fo.fused.clone(), g.constant(Tensor::scalar(0.0))),
        };
        let h = aux.entry.forward(g, &features)?;
        let h = aux.sted.forward(g, &h, a_hat)?;
        let y_mm = aux.decoder.forward(g, &h)?;
        let y_final = aux.heads.forward(g, &y_st, &y_mm)?;
        Ok(ForwardOutput {
            y_final,
            y_st,
            y_mm: Some(y_mm),
            fused: Some(fo.fused),
            penalty,
        })
    }

    /// Mean `|∂x̂/∂S|` over the fused features of `batch`; `None` without an
    /// intervention.
    pub fn confounder_sensitivity(&self, store: &ParamStore, batch: &Batch, a_hat: &Tensor) -> Result<Option<f64>> {
        let Some(iv) = self.aux.as_ref().and_then(|a| a.intervention.as_ref()) else {
            return Ok(None);
        };
        let g = Graph::inference(store);
        let out = self.forward(&g, batch, a_hat)?;
        let fused = out.fused.expect("intervention implies fused features");
        Ok(Some(iv.mean_abs_sensitivity(store, fused.value())?))
    }
}
