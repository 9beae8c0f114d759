//! Node-to-node influence by Shapley attribution with node masking, the
//! blend with the prior adjacency, and its moving-average refresh.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CstpError, Result};
use crate::tensor::Tensor;

/// Largest node count accepted by exhaustive coalition enumeration.
pub const EXHAUSTIVE_MAX_NODES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapMethod {
    /// Average marginal contributions over sampled node permutations.
    Sampled,
    /// Exact Shapley weights over all `2^N` coalitions.
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapConfig {
    pub method: ShapMethod,
    /// Number of sampled permutations.
    pub samples: usize,
    pub seed: u64,
    /// Restrict the attributed output to one horizon step (default: mean
    /// over all steps).
    pub horizon_step: Option<usize>,
    /// Restrict the attributed output to one channel (default: mean over
    /// all channels).
    pub channel: Option<usize>,
    /// Worker threads for model evaluation; results do not depend on it.
    pub threads: usize,
}

impl Default for ShapConfig {
    fn default() -> Self {
        ShapConfig {
            method: ShapMethod::Sampled,
            samples: 2000,
            seed: 0,
            horizon_step: None,
            channel: None,
            threads: 1,
        }
    }
}

/// Signed contributions and the normalised influence matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Attribution {
    /// `φ[i, j]`: contribution of node `i` to the attributed output of node `j`.
    pub raw: Tensor,
    /// `|φ|` min-max scaled to `[0, 1]`.
    pub normalized: Tensor,
}

/// `|φ|` scaled so the smallest entry is 0 and the largest 1. A constant
/// matrix maps to zeros.
pub fn normalize_attribution(raw: &Tensor) -> Tensor {
    let abs = raw.map(f64::abs);
    let lo = abs.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = abs.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Tensor::zeros(raw.shape().to_vec());
    }
    abs.map(|v| (v - lo) / (hi - lo))
}

/// Background slice per node: the mean over background samples,
/// `[B', T, N, d]` → `[T, N, d]`.
fn background_mean(background: &Tensor) -> Result<Tensor> {
    let s = background.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(CstpError::shape(format!("background must be a non-empty [B, T, N, d] batch, got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    let mut mean = vec![0.0; per];
    for chunk in background.data().chunks(per) {
        for (m, v) in mean.iter_mut().zip(chunk) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s[0] as f64);
    Tensor::new(vec![s[1], s[2], s[3]], mean)
}

struct Masker<'a> {
    inputs: &'a Tensor,
    fill: Tensor,
    batch: usize,
    t_len: usize,
    nodes: usize,
    width: usize,
}

impl Masker<'_> {
    /// Appends one copy of the explained batch with nodes outside `present`
    /// replaced by the background.
    fn push(&self, present: &[bool], out: &mut Vec<f64>) {
        let (x, f) = (self.inputs.data(), self.fill.data());
        for b in 0..self.batch {
            for t in 0..self.t_len {
                for n in 0..self.nodes {
                    let src = ((b * self.t_len + t) * self.nodes + n) * self.width;
                    if present[n] {
                        out.extend_from_slice(&x[src..src + self.width]);
                    } else {
                        let fs = (t * self.nodes + n) * self.width;
                        out.extend_from_slice(&f[fs..fs + self.width]);
                    }
                }
            }
        }
    }
}

/// Reduces predictions `[k·B, S, N, d_out]` to per-copy node values `[k][N]`.
fn node_values(pred: &Tensor, copies: usize, batch: usize, nodes: usize, cfg: &ShapConfig) -> Result<Vec<Vec<f64>>> {
    let s = pred.shape();
    if s.len() != 4 || s[0] != copies * batch || s[2] != nodes {
        return Err(CstpError::shape(format!(
            "predictor returned {s:?}, expected [{}, S, {nodes}, d]",
            copies * batch
        )));
    }
    let (steps, width) = (s[1], s[3]);
    let step_range = match cfg.horizon_step {
        Some(h) if h >= steps => return Err(CstpError::invalid(format!("horizon step {h} >= {steps}"))),
        Some(h) => h..h + 1,
        None => 0..steps,
    };
    let ch_range = match cfg.channel {
        Some(c) if c >= width => return Err(CstpError::invalid(format!("channel {c} >= {width}"))),
        Some(c) => c..c + 1,
        None => 0..width,
    };
    let count = (batch * step_range.len() * ch_range.len()) as f64;
    let d = pred.data();
    let mut out = vec![vec![0.0; nodes]; copies];
    for (k, vals) in out.iter_mut().enumerate() {
        for b in 0..batch {
            for t in step_range.clone() {
                for (n, v) in vals.iter_mut().enumerate() {
                    let base = (((k * batch + b) * steps + t) * nodes + n) * width;
                    for c in ch_range.clone() {
                        *v += d[base + c];
                    }
                }
            }
        }
        vals.iter_mut().for_each(|v| *v /= count);
    }
    Ok(out)
}

/// Permutations evaluated per predictor call.
const CHUNK: usize = 8;

/// Shapley attribution of a node-structured predictor.
///
/// `predict` maps `[B, T, N, d]` inputs to `[B, S, N, d_out]` outputs.
/// `inputs` is the explained batch; absent nodes take the mean of
/// `background` over its batch axis.
pub fn estimate_shap<F>(predict: F, inputs: &Tensor, background: &Tensor, cfg: &ShapConfig) -> Result<Attribution>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let s = inputs.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(CstpError::shape(format!("explained inputs must be a non-empty [B, T, N, d] batch, got {s:?}")));
    }
    let fill = background_mean(background)?;
    if fill.shape() != &s[1..] {
        return Err(CstpError::shape(format!(
            "background slices {:?} do not match inputs {s:?}",
            fill.shape()
        )));
    }
    let masker = Masker {
        inputs,
        fill,
        batch: s[0],
        t_len: s[1],
        nodes: s[2],
        width: s[3],
    };
    let raw = match cfg.method {
        ShapMethod::Exhaustive => exhaustive(&predict, &masker, cfg)?,
        ShapMethod::Sampled => sampled(&predict, &masker, cfg)?,
    };
    let normalized = normalize_attribution(&raw);
    Ok(Attribution { raw, normalized })
}

fn evaluate<F>(predict: &F, masker: &Masker, coalitions: &[Vec<bool>], cfg: &ShapConfig) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let mut data = Vec::with_capacity(coalitions.len() * masker.inputs.numel());
    for present in coalitions {
        masker.push(present, &mut data);
    }
    let x = Tensor::new(
        vec![coalitions.len() * masker.batch, masker.t_len, masker.nodes, masker.width],
        data,
    )?;
    node_values(&predict(&x)?, coalitions.len(), masker.batch, masker.nodes, cfg)
}

fn sampled<F>(predict: &F, masker: &Masker, cfg: &ShapConfig) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    if cfg.samples == 0 {
        return Err(CstpError::invalid("Shapley sampling needs at least one permutation"));
    }
    let n = masker.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perms = Vec::with_capacity(cfg.samples);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.samples {
        order.shuffle(&mut rng);
        perms.push(order.clone());
    }
    let chunks: Vec<&[Vec<usize>]> = perms.chunks(CHUNK).collect();

    // Sum of marginal contributions per chunk, always reduced in chunk order
    // so the result does not depend on the worker count.
    let chunk_sum = |chunk: &[Vec<usize>]| -> Result<Vec<f64>> {
        let mut coalitions = Vec::with_capacity(chunk.len() * (n + 1));
        for perm in chunk {
            let mut present = vec![false; n];
            coalitions.push(present.clone());
            for &i in perm {
                present[i] = true;
                coalitions.push(present.clone());
            }
        }
        let values = evaluate(predict, masker, &coalitions, cfg)?;
        let mut acc = vec![0.0; n * n];
        for (p, perm) in chunk.iter().enumerate() {
            let vals = &values[p * (n + 1)..(p + 1) * (n + 1)];
            for (step, &i) in perm.iter().enumerate() {
                for j in 0..n {
                    acc[i * n + j] += vals[step + 1][j] - vals[step][j];
                }
            }
        }
        Ok(acc)
    };

    let threads = cfg.threads.max(1).min(chunks.len());
    let partials: Vec<Result<Vec<f64>>> = if threads <= 1 {
        chunks.iter().map(|c| chunk_sum(c)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<f64>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let per = chunks.len().div_ceil(threads);
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| scope.spawn(|| group.iter().map(|c| chunk_sum(c)).collect::<Vec<_>>()))
                .collect();
            let mut k = 0;
            for h in handles {
                for r in h.join().expect("attribution worker panicked") {
                    slots[k] = Some(r);
                    k += 1;
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk evaluated")).collect()
    };
    let mut total = vec![0.0; n * n];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part?) {
            *t += v;
        }
    }
    total.iter_mut().for_each(|t| *t /= cfg.samples as f64);
    Tensor::new(vec![n, n], total)
}

fn exhaustive<F>(predict: &F, masker: &Masker, cfg: &ShapConfig) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let n = masker.nodes;
    if n > EXHAUSTIVE_MAX_NODES {
        return Err(CstpError::invalid(format!(
            "exhaustive attribution over {n} nodes would need 2^{n} coalitions; limit is {EXHAUSTIVE_MAX_NODES}"
        )));
    }
    let total = 1usize << n;
    let coalitions: Vec<Vec<bool>> = (0..total)
        .map(|mask| (0..n).map(|i| mask >> i & 1 == 1).collect())
        .collect();
    let mut values = Vec::with_capacity(total);
    for chunk in coalitions.chunks(CHUNK * (n + 1)) {
        values.extend(evaluate(predict, masker, chunk, cfg)?);
    }
    // weight(|S|) = |S|!·(N−|S|−1)!/N!
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    let weights: Vec<f64> = (0..n).map(|k| fact(k) * fact(n - k - 1) / fact(n)).collect();
    let mut phi = vec![0.0; n * n];
    for mask in 0..total {
        let size = mask.count_ones() as usize;
        for i in 0..n {
            if mask >> i & 1 == 1 {
                continue;
            }
            let with = mask | 1 << i;
            let w = weights[size];
            for j in 0..n {
                phi[i * n + j] += w * (values[with][j] - values[mask][j]);
            }
        }
    }
    Tensor::new(vec![n, n], phi)
}

/// `λ·A0 + (1−λ)·A_shap`.
pub fn hybrid(prior: &Tensor, shap: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CstpError::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if prior.rank() != 2 || prior.shape()[0] != prior.shape()[1] {
        return Err(CstpError::shape(format!("prior adjacency must be square, got {:?}", prior.shape())));
    }
    prior.zip_map(shap, |a, s| lambda * a + (1.0 - lambda) * s)
}

/// Prior adjacency, the latest attribution and the smoothed blend in use.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridGraph {
    pub prior: Tensor,
    pub shap: Tensor,
    pub lambda: f64,
    pub current: Tensor,
    pub momentum: f64,
    pub period: usize,
}

impl HybridGraph {
    /// Starts from the prior alone: the attribution slot is seeded with the
    /// prior so the first blend equals it.
    pub fn new(prior: Tensor, lambda: f64, momentum: f64, period: usize) -> Result<Self> {
        if period == 0 {
            return Err(CstpError::invalid("graph refresh period must be >= 1"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(CstpError::invalid(format!("momentum must lie in [0, 1], got {momentum}")));
        }
        if prior.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(CstpError::invalid("prior adjacency must be finite and non-negative"));
        }
        let current = hybrid(&prior, &prior, lambda)?;
        Ok(HybridGraph {
            shap: prior.clone(),
            prior,
            lambda,
            current,
            momentum,
            period,
        })
    }

    pub fn is_refresh_epoch(&self, epoch: usize) -> bool {
        epoch > 0 && epoch.is_multiple_of(self.period)
    }

    /// At refresh epochs, `A ← µ·A + (1−µ)·fresh`; otherwise unchanged.
    /// Returns whether the graph changed.
    pub fn ema_refresh(&mut self, epoch: usize, fresh_hybrid: &Tensor) -> Result<bool> {
        if !self.is_refresh_epoch(epoch) {
            return Ok(false);
        }
        let mu = self.momentum;
        self.current = self.current.zip_map(fresh_hybrid, |a, f| mu * a + (1.0 - mu) * f)?;
        Ok(true)
    }

    /// Blends a fresh attribution with the prior and applies
    /// [`HybridGraph::ema_refresh`].
    pub fn refresh_with_shap(&mut self, epoch: usize, shap: &Tensor) -> Result<bool> {
        if !self.is_refresh_epoch(epoch) {
            return Ok(false);
        }
        let fresh = hybrid(&self.prior, shap, self.lambda)?;
        self.shap = shap.clone();
        self.ema_refresh(epoch, &fresh)
    }
}

/// Writes `[N, N]` matrices as CSV rows `matrix,source,<N target columns>`
/// with node ids as the header.
pub fn write_matrices_csv<W: std::io::Write>(out: W, matrices: &[(&str, &Tensor)]) -> Result<()> {
    let n = matrices.first().map_or(0, |(_, m)| m.shape()[0]);
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| CstpError::data(format!("writing matrix table: {e}"));
    let mut header = vec!["matrix".to_string(), "node".to_string()];
    header.extend((0..n).map(|j| j.to_string()));
    w.write_record(&header).map_err(err)?;
    for (name, m) in matrices {
        if m.shape() != [n, n] {
            return Err(CstpError::shape(format!("{name} is {:?}, expected [{n}, {n}]", m.shape())));
        }
        for (i, row) in m.data().chunks(n.max(1)).enumerate() {
            let mut rec = vec![name.to_string(), i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
    }
    w.flush().map_err(|e| CstpError::data(format!("writing matrix table: {e}")))
}
