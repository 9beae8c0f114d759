//! Windowing, chronological splits, the optimiser, the training loop with
//! periodic graph refresh, and forecast metrics.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{bag_of_tokens, build_spatial_alignment, build_temporal_alignment, NormStats, DEFAULT_VOCAB};
use crate::autodiff::{GradResult, Graph, ParamStore};
use crate::causal_graph::{estimate_shap, HybridGraph, ShapConfig, ShapMethod};
use crate::data::MultiModalDataset;
use crate::dual::{compute_losses, LossNorm, LossWeights};
use crate::error::{CstpError, Result};
use crate::fusion::AttentionAxis;
use crate::model::{Batch, Model, ModelConfig, ModelMode};
use crate::sted::{normalized_adjacency, StedConfig, TemporalKind};
use crate::tensor::Tensor;

/// Every training and model setting, read from a flat TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Weight of the prior adjacency in the blended graph.
    pub lambda: f64,
    /// Balance between the two branch losses.
    pub beta: f64,
    /// Confounder penalty weight.
    pub gamma: f64,
    pub refresh_period: usize,
    pub ema_momentum: f64,
    pub shap_samples: usize,
    pub shap_windows: usize,
    pub threads: usize,
    pub loss_norm: LossNorm,
    pub mode: ModelMode,
    pub t_in: usize,
    pub s_out: usize,
    pub width: usize,
    pub layers: usize,
    pub state: usize,
    pub conv: usize,
    pub input_skip: bool,
    pub temporal: TemporalKind,
    pub fusion_heads: usize,
    pub fusion_axis: AttentionAxis,
    pub text_vocab: usize,
    pub text_width: usize,
    pub image_width: usize,
    pub latent_width: usize,
    pub alpha_init: f64,
    pub head_hidden: usize,
    pub decoder_hidden_mult: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sted = StedConfig::default();
        TrainConfig {
            lr: 1e-3,
            lr_decay: 0.5,
            decay_every: 5,
            patience: 10,
            batch_size: 16,
            max_epochs: 100,
            seed: 0,
            lambda: 0.5,
            beta: 0.5,
            gamma: 0.1,
            refresh_period: 5,
            ema_momentum: 0.9,
            shap_samples: 256,
            shap_windows: 8,
            threads: 1,
            loss_norm: LossNorm::Mse,
            mode: ModelMode::Full,
            t_in: 12,
            s_out: 12,
            width: sted.width,
            layers: sted.layers,
            state: sted.state,
            conv: sted.conv,
            input_skip: sted.input_skip,
            temporal: TemporalKind::Mamba,
            fusion_heads: 4,
            fusion_axis: AttentionAxis::Node,
            text_vocab: DEFAULT_VOCAB,
            text_width: 16,
            image_width: 16,
            latent_width: 8,
            alpha_init: 0.1,
            head_hidden: 16,
            decoder_hidden_mult: 2,
        }
    }
}

/// Extents taken from the dataset rather than the config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataDims {
    pub nodes: usize,
    pub channels: usize,
    pub image_channels: usize,
}

impl DataDims {
    pub fn of(data: &MultiModalDataset) -> Self {
        DataDims {
            nodes: data.series.nodes(),
            channels: data.series.channels(),
            image_channels: data.image_shape().map_or(1, |s| s[2]),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| CstpError::parse(origin, e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CstpError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CstpError::invalid(format!("{k} must be positive, got {v}")));
            }
        }
        let counts = [
            ("decay_every", self.decay_every),
            ("patience", self.patience),
            ("batch_size", self.batch_size),
            ("refresh_period", self.refresh_period),
            ("shap_samples", self.shap_samples),
            ("shap_windows", self.shap_windows),
            ("threads", self.threads),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(CstpError::invalid(format!("{k} must be >= 1")));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CstpError::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(CstpError::invalid(format!("ema_momentum must lie in [0, 1], got {}", self.ema_momentum)));
        }
        self.loss_weights().validate()?;
        self.sted().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn sted(&self) -> StedConfig {
        StedConfig {
            layers: self.layers,
            width: self.width,
            state: self.state,
            conv: self.conv,
            input_skip: self.input_skip,
        }
    }

    pub fn model(&self, dims: DataDims) -> ModelConfig {
        ModelConfig {
            nodes: dims.nodes,
            channels: dims.channels,
            t_in: self.t_in,
            s_out: self.s_out,
            sted: self.sted(),
            temporal: self.temporal,
            fusion_heads: self.fusion_heads,
            fusion_axis: self.fusion_axis,
            text_vocab: self.text_vocab,
            text_width: self.text_width,
            image_channels: dims.image_channels,
            image_width: self.image_width,
            latent_width: self.latent_width,
            alpha_init: self.alpha_init,
            head_hidden: self.head_hidden,
            decoder_hidden_mult: self.decoder_hidden_mult,
            mode: self.mode,
        }
    }

    /// Learning rate used during 1-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = epoch.saturating_sub(1) / self.decay_every;
        self.lr * self.lr_decay.powi(steps as i32)
    }
}

/// Minimum number of time steps beyond one window span.
pub const MIN_EXTRA_STEPS: usize = 30;

/// Contiguous train/validation/test index ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// 80/10/10 by time with floors; the remainder goes to training.
pub fn chronological_split(len: usize, window_span: usize) -> Result<Split> {
    if len < MIN_EXTRA_STEPS + window_span {
        return Err(CstpError::data(format!(
            "series of length {len} is too short: need at least {} steps",
            MIN_EXTRA_STEPS + window_span
        )));
    }
    let val = len / 10;
    let test = len / 10;
    let train = len - val - test;
    Ok(Split {
        train: 0..train,
        val: train..train + val,
        test: train + val..len,
    })
}

/// Start indices of the sliding windows lying entirely inside `range`.
pub fn make_windows(range: Range<usize>, t_in: usize, s_out: usize, stride: usize) -> Result<Vec<usize>> {
    if t_in == 0 || s_out == 0 || stride == 0 {
        return Err(CstpError::invalid("window lengths and stride must be >= 1"));
    }
    let span = t_in + s_out;
    if range.len() < span {
        warn!(
            "split {range:?} of length {} is shorter than one window ({span}); no samples",
            range.len()
        );
        return Ok(Vec::new());
    }
    Ok((range.start..=range.end - span).step_by(stride).collect())
}

/// A dataset normalised and indexed for fast batch assembly.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: Split,
    pub norm: NormStats,
    /// Original `[T, N, c]` values.
    pub raw: Tensor,
    /// Normalised `[T, N, c]` values.
    pub values: Tensor,
    pub vocab: usize,
    /// Prior adjacency `[N, N]`.
    pub prior: Tensor,
    /// Per-step summed hashed token counts, `[T, V]`.
    text_counts: Vec<f64>,
    /// Per-step number of text observations.
    text_obs: Vec<f64>,
    /// Per-step `(node, image index)` matches.
    images_at: Vec<Vec<(usize, usize)>>,
    image_pixels: Vec<Tensor>,
    image_shape: Option<[usize; 3]>,
    pub t_in: usize,
    pub s_out: usize,
}

impl PreparedData {
    pub fn new(data: &MultiModalDataset, t_in: usize, s_out: usize, vocab: usize) -> Result<Self> {
        data.validate()?;
        let len = data.series.len();
        let split = chronological_split(len, t_in + s_out)?;
        let values = &data.series.values;
        let norm = NormStats::fit(values, split.train.len())?;
        let times = &data.series.timestamps;

        let mut text_counts = vec![0.0; len * vocab];
        let mut text_obs = vec![0.0; len];
        let text_times: Vec<f64> = data.text.iter().map(|o| o.timestamp).collect();
        let mt = build_temporal_alignment(&text_times, times)?;
        for (obs, &t) in data.text.iter().zip(&mt.index) {
            for (acc, c) in text_counts[t * vocab..(t + 1) * vocab]
                .iter_mut()
                .zip(bag_of_tokens(&obs.tokens, vocab))
            {
                *acc += c;
            }
            text_obs[t] += 1.0;
        }

        let mut images_at = vec![Vec::new(); len];
        let image_times: Vec<f64> = data.images.iter().map(|o| o.timestamp).collect();
        let image_coords: Vec<[f64; 2]> = data.images.iter().map(|o| o.coords).collect();
        let it = build_temporal_alignment(&image_times, times)?;
        let is = build_spatial_alignment(&image_coords, &data.series.coords)?;
        for (k, (&t, &n)) in it.index.iter().zip(&is.index).enumerate() {
            images_at[t].push((n, k));
        }
        let shape = data.image_shape();
        if let Some(s) = shape {
            if data.images.iter().any(|o| o.pixels.shape() != s) {
                return Err(CstpError::data("all images must share one shape"));
            }
        }

        Ok(PreparedData {
            split,
            values: norm.normalize(values)?,
            raw: values.clone(),
            norm,
            vocab,
            prior: data.graph.clone(),
            text_counts,
            text_obs,
            images_at,
            image_pixels: data.images.iter().map(|o| o.pixels.clone()).collect(),
            image_shape: shape,
            t_in,
            s_out,
        })
    }

    /// Replaces the fitted statistics, e.g. with those of a checkpoint.
    pub fn set_norm(&mut self, norm: NormStats) -> Result<()> {
        self.values = norm.normalize(&self.raw)?;
        self.norm = norm;
        Ok(())
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn windows(&self, range: Range<usize>) -> Result<Vec<usize>> {
        make_windows(range, self.t_in, self.s_out, 1)
    }

    fn slab<'a>(&self, src: &'a Tensor, start: usize, steps: usize) -> &'a [f64] {
        let per = self.nodes() * self.channels();
        &src.data()[start * per..(start + steps) * per]
    }

    /// Normalised series windows `[B, T_in, N, c]` for the given starts.
    pub fn inputs(&self, starts: &[usize]) -> Result<Tensor> {
        let mut x = Vec::with_capacity(starts.len() * self.t_in * self.nodes() * self.channels());
        for &s in starts {
            x.extend_from_slice(self.slab(&self.values, s, self.t_in));
        }
        Tensor::new(vec![starts.len(), self.t_in, self.nodes(), self.channels()], x)
    }

    /// Targets in original units, `[B, S_out, N, c]`.
    pub fn raw_targets(&self, starts: &[usize]) -> Result<Tensor> {
        let mut y = Vec::with_capacity(starts.len() * self.s_out * self.nodes() * self.channels());
        for &s in starts {
            y.extend_from_slice(self.slab(&self.raw, s + self.t_in, self.s_out));
        }
        Tensor::new(vec![starts.len(), self.s_out, self.nodes(), self.channels()], y)
    }

    pub fn batch(&self, starts: &[usize]) -> Result<Batch> {
        let (b, t, n, c) = (starts.len(), self.t_in, self.nodes(), self.channels());
        let x = self.inputs(starts)?;
        let mut y = Vec::with_capacity(b * self.s_out * n * c);
        for &s in starts {
            y.extend_from_slice(self.slab(&self.values, s + t, self.s_out));
        }
        let v = self.vocab;
        let mut counts = Vec::with_capacity(b * t * v);
        let mut obs = Vec::with_capacity(b * t);
        let mut pixels = Vec::new();
        let mut rows = Vec::new();
        for (bi, &s) in starts.iter().enumerate() {
            for ti in 0..t {
                let step = s + ti;
                counts.extend_from_slice(&self.text_counts[step * v..(step + 1) * v]);
                obs.push(self.text_obs[step]);
                for &(node, k) in &self.images_at[step] {
                    pixels.extend_from_slice(self.image_pixels[k].data());
                    rows.push((bi * t + ti) * n + node);
                }
            }
        }
        let images = match self.image_shape {
            Some([h, w, ch]) if !rows.is_empty() => Some(Tensor::new(vec![rows.len(), h, w, ch], pixels)?),
            _ => None,
        };
        Ok(Batch {
            x,
            y: Tensor::new(vec![b, self.s_out, n, c], y)?,
            text_counts: Tensor::new(vec![b, t, v], counts)?,
            text_obs: Tensor::new(vec![b, t, 1], obs)?,
            images,
            image_rows: rows,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
pub fn adam_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: AdamConfig) {
    assert!(t >= 1, "Adam steps are counted from 1");
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam moments for every parameter that has received a gradient.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    moments: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            ..Default::default()
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &GradResult, lr: f64) -> Result<()> {
        self.step += 1;
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| CstpError::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(CstpError::shape(format!("gradient shape mismatch for {name}")));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            adam_step(p.data_mut(), g.data(), m, v, self.step, lr, self.config);
        }
        Ok(())
    }
}

/// Forecast errors in original units.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every target is below [`MAPE_FLOOR`].
    pub mape: Option<f64>,
    pub mape_excluded: usize,
    pub count: usize,
}

/// Targets with `|y|` below this are left out of the percentage error.
pub const MAPE_FLOOR: f64 = 1e-3;

pub fn compute_metrics(y: &[f64], y_hat: &[f64]) -> Result<Metrics> {
    if y.len() != y_hat.len() {
        return Err(CstpError::shape(format!("{} targets vs {} predictions", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(CstpError::invalid("cannot evaluate an empty split"));
    }
    let n = y.len() as f64;
    let (mut abs, mut sq, mut pct, mut used) = (0.0, 0.0, 0.0, 0usize);
    for (&t, &p) in y.iter().zip(y_hat) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
        if t.abs() >= MAPE_FLOOR {
            pct += (e / t).abs();
            used += 1;
        }
    }
    let mae = abs / n;
    let rmse = (sq / n).sqrt();
    assert!(
        rmse >= mae * (1.0 - 1e-12),
        "RMSE {rmse} below MAE {mae} violates Jensen's inequality"
    );
    Ok(Metrics {
        mae,
        rmse,
        mape: (used > 0).then(|| 100.0 * pct / used as f64),
        mape_excluded: y.len() - used,
        count: y.len(),
    })
}

/// Everything needed to reproduce predictions.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub dims: DataDims,
    pub params: ParamStore,
    pub norm: NormStats,
    pub graph: HybridGraph,
    /// Completed epochs when the state was captured.
    pub epoch: usize,
}

impl TrainState {
    /// Rebuilds the module layout and checks it against the stored
    /// parameters.
    pub fn model(&self) -> Result<Model> {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::init(&mut scratch, &self.config.model(self.dims), &mut rng)?;
        for (name, t) in scratch.iter() {
            match self.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(CstpError::data(format!(
                        "stored parameters do not match the configured model at {name}"
                    )))
                }
            }
        }
        if scratch.len() != self.params.len() {
            return Err(CstpError::data("stored parameters include entries the model does not use"));
        }
        Ok(model)
    }

    /// Normalised adjacency used by the encoders. Attribution rows are
    /// sources, so each node aggregates along its column.
    pub fn a_hat(&self) -> Result<Tensor> {
        normalized_adjacency(&self.graph.current.transpose()?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_pred: f64,
    pub l_st: f64,
    pub l_mm: f64,
    pub penalty: f64,
    pub lr: f64,
    pub val: Metrics,
    pub val_l_pred: f64,
    pub graph_refreshed: bool,
}

pub const HISTORY_HEADER: [&str; 9] = [
    "epoch", "L_pred", "L_st", "L_mm", "penalty", "lr", "val_MAE", "val_RMSE", "val_MAPE",
];

pub fn write_history<W: Write>(out: W, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| CstpError::data(format!("writing history: {e}"));
    w.write_record(HISTORY_HEADER).map_err(csv_err)?;
    for r in history {
        let mape = r.val.mape.map_or_else(|| "nan".to_string(), |m| m.to_string());
        w.write_record([
            r.epoch.to_string(),
            r.l_pred.to_string(),
            r.l_st.to_string(),
            r.l_mm.to_string(),
            r.penalty.to_string(),
            r.lr.to_string(),
            r.val.mae.to_string(),
            r.val.rmse.to_string(),
            mape,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CstpError::data(format!("writing history: {e}")))
}

pub fn write_history_file(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| CstpError::io(path, e))?;
    write_history(std::io::BufWriter::new(f), history)
}

/// Metrics in original units together with the normalised final-head MSE.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub l_pred: f64,
}

/// Runs the model over `starts` and scores the final predictions.
pub fn evaluate_windows(
    model: &Model,
    params: &ParamStore,
    data: &PreparedData,
    starts: &[usize],
    a_hat: &Tensor,
    batch_size: usize,
) -> Result<Evaluation> {
    if starts.is_empty() {
        return Err(CstpError::invalid("cannot evaluate an empty split"));
    }
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let (mut sq, mut count) = (0.0, 0usize);
    for chunk in starts.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let g = Graph::inference(params);
        let out = model.forward(&g, &batch, a_hat)?;
        let y_norm = out.y_final.value();
        for (p, t) in y_norm.data().iter().zip(batch.y.data()) {
            sq += (p - t) * (p - t);
        }
        count += y_norm.numel();
        preds.extend(data.norm.denormalize(y_norm)?.into_data());
        targets.extend(data.raw_targets(chunk)?.into_data());
    }
    Ok(Evaluation {
        metrics: compute_metrics(&targets, &preds)?,
        l_pred: sq / count as f64,
    })
}

/// Metrics of a trained state on one split of `data`.
pub fn evaluate(state: &TrainState, data: &PreparedData, range: Range<usize>) -> Result<Metrics> {
    let model = state.model()?;
    let starts = data.windows(range)?;
    Ok(evaluate_windows(&model, &state.params, data, &starts, &state.a_hat()?, state.config.batch_size)?.metrics)
}

pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub best: TrainState,
    /// Parameters after the last completed epoch.
    pub last: TrainState,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Observer hook called after each epoch with the current state.
pub trait EpochHook {
    fn after_epoch(&mut self, record: &EpochRecord, model: &Model, params: &ParamStore, a_hat: &Tensor) -> Result<()>;
}

impl EpochHook for () {
    fn after_epoch(&mut self, _: &EpochRecord, _: &Model, _: &ParamStore, _: &Tensor) -> Result<()> {
        Ok(())
    }
}

/// Normalised attribution of the series branch over a seeded sample of
/// training windows.
pub fn attribute(
    model: &Model,
    params: &ParamStore,
    data: &PreparedData,
    a_hat: &Tensor,
    config: &TrainConfig,
    seed: u64,
) -> Result<crate::causal_graph::Attribution> {
    let mut starts = data.windows(data.split.train.clone())?;
    if starts.is_empty() {
        return Err(CstpError::data("no training windows to attribute over"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    starts.shuffle(&mut rng);
    starts.truncate(config.shap_windows);
    let inputs = data.inputs(&starts)?;
    let cfg = ShapConfig {
        method: ShapMethod::Sampled,
        samples: config.shap_samples,
        seed,
        threads: config.threads,
        ..Default::default()
    };
    estimate_shap(|x: &Tensor| model.predict_main(params, x, a_hat), &inputs, &inputs, &cfg)
}

pub fn train(data: &PreparedData, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(data, config, &mut ())
}

pub fn train_with_hook<H: EpochHook>(data: &PreparedData, config: &TrainConfig, hook: &mut H) -> Result<TrainOutcome> {
    config.validate()?;
    if data.t_in != config.t_in || data.s_out != config.s_out || data.vocab != config.text_vocab {
        return Err(CstpError::invalid("prepared data was built with different window or vocabulary settings"));
    }
    let dims = DataDims {
        nodes: data.nodes(),
        channels: data.channels(),
        image_channels: data.image_shape.map_or(1, |s| s[2]),
    };
    let mut params = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::init(&mut params, &config.model(dims), &mut init_rng)?;
    let graph = HybridGraph::new(data.prior.clone(), config.lambda, config.ema_momentum, config.refresh_period)?;

    let mut state = TrainState {
        config: config.clone(),
        dims,
        params,
        norm: data.norm.clone(),
        graph,
        epoch: 0,
    };
    let mut a_hat = state.a_hat()?;
    let train_windows = data.windows(data.split.train.clone())?;
    let val_windows = data.windows(data.split.val.clone())?;
    if config.max_epochs > 0 && (train_windows.is_empty() || val_windows.is_empty()) {
        return Err(CstpError::data(format!(
            "training needs at least one training and one validation window ({} and {} available)",
            train_windows.len(),
            val_windows.len()
        )));
    }

    let mut best = state.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    let mut history = Vec::new();
    let mut adam = Adam::new(AdamConfig::default());
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let weights = config.loss_weights();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let lr = config.lr_at(epoch);
        let mut order = train_windows.clone();
        order.shuffle(&mut order_rng);
        let (mut s_pred, mut s_st, mut s_mm, mut s_pen, mut seen) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.batch(chunk)?;
            let grads = {
                let g = Graph::new(&state.params, true);
                let out = model.forward(&g, &batch, &a_hat)?;
                let y = g.constant(batch.y.clone());
                let y_mm = out.y_mm.as_ref().unwrap_or(&out.y_st);
                let terms = compute_losses(&g, &y, &out.y_final, &out.y_st, y_mm, weights, &out.penalty, config.loss_norm)?;
                let loss = if config.mode == ModelMode::MainOnly { terms.pred.clone() } else { terms.all.clone() };
                let total = loss.value().item()?;
                if !total.is_finite() {
                    return Err(CstpError::Diverged { epoch });
                }
                let w = chunk.len() as f64;
                s_pred += w * terms.pred.value().item()?;
                s_st += w * terms.st.value().item()?;
                s_mm += w * if out.y_mm.is_some() { terms.mm.value().item()? } else { 0.0 };
                s_pen += w * out.penalty.value().item()?;
                seen += chunk.len();
                g.backward(&loss)?
            };
            if grads.values().any(|t| !t.all_finite()) {
                return Err(CstpError::Diverged { epoch });
            }
            adam.update(&mut state.params, &grads, lr)?;
        }
        state.epoch = epoch;

        let val = evaluate_windows(&model, &state.params, data, &val_windows, &a_hat, config.batch_size)?;
        let seen = seen as f64;
        let mut record = EpochRecord {
            epoch,
            l_pred: s_pred / seen,
            l_st: s_st / seen,
            l_mm: s_mm / seen,
            penalty: s_pen / seen,
            lr,
            val_l_pred: val.l_pred,
            val: val.metrics,
            graph_refreshed: false,
        };
        if record.val_l_pred < best_val {
            best_val = record.val_l_pred;
            best = state.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        hook.after_epoch(&record, &model, &state.params, &a_hat)?;

        if state.graph.is_refresh_epoch(epoch) {
            let att = attribute(&model, &state.params, data, &a_hat, config, config.seed.wrapping_add(epoch as u64))?;
            record.graph_refreshed = state.graph.refresh_with_shap(epoch, &att.normalized)?;
            a_hat = state.a_hat()?;
        }
        info!(
            "epoch {epoch}: L_pred {:.5} L_st {:.5} L_mm {:.5} penalty {:.3e} val MAE {:.5}",
            record.l_pred, record.l_st, record.l_mm, record.penalty, record.val.mae
        );
        history.push(record);
        if since_best >= config.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        last: state,
        history,
        stopped_early,
    })
}
