//! Matching auxiliary observations to the series grid, series
//! normalisation, and the lightweight text and image encoders.

use std::hash::Hasher;

use fnv::FnvHasher;
use log::warn;
use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{CstpError, Result};
use crate::nn::Linear;
use crate::tensor::Tensor;

/// A binary matrix whose rows are each one-hot, stored as column indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotRows {
    pub index: Vec<usize>,
    pub cols: usize,
}

impl OneHotRows {
    pub fn rows(&self) -> usize {
        self.index.len()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(vec![self.index.len(), self.cols]);
        for (r, &c) in self.index.iter().enumerate() {
            t.set(&[r, c], 1.0);
        }
        t
    }
}

/// Temporal and spatial matchings for a set of observations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentMatrices {
    pub temporal: OneHotRows,
    pub spatial: OneHotRows,
}

/// Matches each observation time to the nearest series timestamp; ties go
/// to the earlier slot. Times outside the series range clamp to an endpoint
/// with a warning.
pub fn build_temporal_alignment(obs_times: &[f64], st_times: &[f64]) -> Result<OneHotRows> {
    if st_times.is_empty() {
        return Err(CstpError::invalid("temporal alignment needs at least one series timestamp"));
    }
    if st_times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(CstpError::invalid("series timestamps must be strictly increasing"));
    }
    let (lo, hi) = (st_times[0], st_times[st_times.len() - 1]);
    let mut out_of_range = 0usize;
    let index = obs_times
        .iter()
        .map(|&tau| {
            if tau < lo || tau > hi {
                out_of_range += 1;
            }
            let k = st_times.partition_point(|&s| s < tau);
            if k == 0 {
                0
            } else if k == st_times.len() {
                k - 1
            } else if (tau - st_times[k - 1]).abs() <= (tau - st_times[k]).abs() {
                k - 1
            } else {
                k
            }
        })
        .collect();
    if out_of_range > 0 {
        warn!("{out_of_range} observation(s) fall outside the series time range [{lo}, {hi}] and were clamped");
    }
    Ok(OneHotRows {
        index,
        cols: st_times.len(),
    })
}

/// Matches each observation location to the Euclidean-nearest node; ties go
/// to the smaller node index.
pub fn build_spatial_alignment(obs_coords: &[[f64; 2]], node_coords: &[[f64; 2]]) -> Result<OneHotRows> {
    if node_coords.is_empty() {
        return Err(CstpError::invalid("spatial alignment needs at least one node"));
    }
    let index = obs_coords
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, q) in node_coords.iter().enumerate() {
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        })
        .collect();
    Ok(OneHotRows {
        index,
        cols: node_coords.len(),
    })
}

/// `Mtᵀ · feats`, replicated over `nodes`: `[T_st, nodes, d]`.
pub fn align_text(mt: &OneHotRows, feats: &Tensor, nodes: usize) -> Result<Tensor> {
    if feats.rank() != 2 || feats.shape()[0] != mt.rows() {
        return Err(CstpError::shape(format!(
            "align_text: {} matched rows vs features {:?}",
            mt.rows(),
            feats.shape()
        )));
    }
    let d = feats.shape()[1];
    let mut slots = vec![0.0; mt.cols * d];
    for (i, &t) in mt.index.iter().enumerate() {
        for (o, v) in slots[t * d..(t + 1) * d].iter_mut().zip(&feats.data()[i * d..(i + 1) * d]) {
            *o += v;
        }
    }
    let mut out = Vec::with_capacity(mt.cols * nodes * d);
    for t in 0..mt.cols {
        for _ in 0..nodes {
            out.extend_from_slice(&slots[t * d..(t + 1) * d]);
        }
    }
    Tensor::new(vec![mt.cols, nodes, d], out)
}

/// Per channel `Mtᵀ · feats · Ms` for `feats: [K_t, K_s, d]`: `[T_st, N_st, d]`.
pub fn align_image(mt: &OneHotRows, ms: &OneHotRows, feats: &Tensor) -> Result<Tensor> {
    let s = feats.shape();
    if s.len() != 3 || s[0] != mt.rows() || s[1] != ms.rows() {
        return Err(CstpError::shape(format!(
            "align_image: {}x{} matched rows vs features {s:?}",
            mt.rows(),
            ms.rows()
        )));
    }
    let d = s[2];
    let mut out = Tensor::zeros(vec![mt.cols, ms.cols, d]);
    let fd = feats.data();
    for (i, &t) in mt.index.iter().enumerate() {
        for (j, &n) in ms.index.iter().enumerate() {
            let src = &fd[(i * ms.rows() + j) * d..(i * ms.rows() + j + 1) * d];
            let off = (t * ms.cols + n) * d;
            for (o, v) in out.data_mut()[off..off + d].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// List form of [`align_image`]: observation `k` is matched to slot
/// `time[k]` and node `node[k]` and contributes only there, i.e. the
/// literal product with a diagonal feature grid. Differentiable in `feats`.
pub fn align_image_list(
    g: &Graph,
    time: &[usize],
    node: &[usize],
    feats: &Var,
    t_len: usize,
    nodes: usize,
) -> Result<Var> {
    if time.len() != node.len() || node.iter().any(|&n| n >= nodes) || time.iter().any(|&t| t >= t_len) {
        return Err(CstpError::shape("align_image_list: inconsistent slot indices"));
    }
    let rows: Vec<usize> = time.iter().zip(node).map(|(&t, &n)| t * nodes + n).collect();
    let d = *feats.shape().last().unwrap_or(&0);
    let flat = g.scatter_rows(feats, &rows, t_len * nodes)?;
    g.reshape(&flat, vec![t_len, nodes, d])
}

/// Per-(node, channel) mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    /// `[N, d]`
    pub mean: Tensor,
    /// `[N, d]`, floored at [`NormStats::STD_FLOOR`].
    pub std: Tensor,
}

impl NormStats {
    pub const STD_FLOOR: f64 = 1e-6;

    /// Statistics over the first `rows` time steps of `values: [T, N, d]`.
    pub fn fit(values: &Tensor, rows: usize) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || rows == 0 || rows > s[0] {
            return Err(CstpError::invalid(format!(
                "normalisation needs 1..={} training rows of a [T, N, d] series, got {rows} for {s:?}",
                s.first().copied().unwrap_or(0)
            )));
        }
        let width = s[1] * s[2];
        let head = &values.data()[..rows * width];
        let mut mean = vec![0.0; width];
        for row in head.chunks(width) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; width];
        for row in head.chunks(width) {
            for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / rows as f64).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(NormStats {
            mean: Tensor::new(vec![s[1], s[2]], mean)?,
            std: Tensor::new(vec![s[1], s[2]], std)?,
        })
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 2..] != *self.mean.shape() {
            return Err(CstpError::shape(format!(
                "normalisation stats {:?} do not match values {s:?}",
                self.mean.shape()
            )));
        }
        let w = self.mean.numel();
        let (m, sd) = (self.mean.data(), self.std.data());
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, m[i % w], sd[i % w]))
            .collect();
        Tensor::new(s.to_vec(), data)
    }

    /// `(x - µ) / σ` over trailing `[N, d]` axes.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| v * s + m)
    }
}

pub const DEFAULT_VOCAB: usize = 512;

/// Bucket of a token under the 64-bit FNV-1a hash.
pub fn token_bucket(token: &str, vocab: usize) -> usize {
    let mut h = FnvHasher::default();
    h.write(token.as_bytes());
    (h.finish() % vocab as u64) as usize
}

/// Hashed bag-of-tokens counts of width `vocab`.
pub fn bag_of_tokens<S: AsRef<str>>(tokens: &[S], vocab: usize) -> Vec<f64> {
    let mut counts = vec![0.0; vocab];
    for t in tokens {
        counts[token_bucket(t.as_ref(), vocab)] += 1.0;
    }
    counts
}

/// Hashed bag of tokens followed by a learned affine map.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: usize,
    pub linear: Linear,
}

impl TextEncoder {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        d_text: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab == 0 || d_text == 0 {
            return Err(CstpError::invalid("text encoder widths must be >= 1"));
        }
        Ok(TextEncoder {
            vocab,
            linear: Linear::init(store, name, vocab, d_text, true, rng)?,
        })
    }

    pub fn width(&self) -> usize {
        self.linear.d_out
    }

    /// `counts: [.., V]` → `[.., d_text]`.
    pub fn forward(&self, g: &Graph, counts: &Var) -> Result<Var> {
        self.linear.forward(g, counts)
    }

    /// Encodes one token list.
    pub fn encode(&self, store: &ParamStore, tokens: &[String]) -> Result<Tensor> {
        let g = Graph::inference(store);
        let c = g.constant(Tensor::from_vec(bag_of_tokens(tokens, self.vocab)));
        Ok(self.forward(&g, &c)?.to_tensor())
    }

    /// Aligned encodings from per-slot summed counts `[.., V]` and per-slot
    /// observation counts `[.., 1]`. Because the encoder is affine this
    /// equals aligning the individually encoded observations.
    pub fn forward_aligned(&self, g: &Graph, summed_counts: &Var, obs_counts: &Var) -> Result<Var> {
        let w = g.param(&self.linear.weight)?;
        let proj = g.linear(summed_counts, &w, None)?;
        match &self.linear.bias {
            Some(b) => {
                let b = g.param(b)?;
                let row = g.reshape(&b, vec![1, b.shape()[0]])?;
                let bias = g.linear(obs_counts, &row, None)?;
                g.add(&proj, &bias)
            }
            None => Ok(proj),
        }
    }
}

/// Two stride-2 3×3 convolutions with ReLU, global average pooling and an
/// affine head.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub in_channels: usize,
    pub conv1: (String, String),
    pub conv2: (String, String),
    pub head: Linear,
}

impl ImageEncoder {
    pub const HIDDEN: (usize, usize) = (8, 16);

    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        d_img: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || d_img == 0 {
            return Err(CstpError::invalid("image encoder widths must be >= 1"));
        }
        let (c1, c2) = Self::HIDDEN;
        let mut conv = |tag: &str, cin: usize, cout: usize| -> Result<(String, String)> {
            let w = format!("{name}.{tag}.weight");
            let b = format!("{name}.{tag}.bias");
            let std = (2.0 / (9 * cin) as f64).sqrt();
            store.insert(w.clone(), Tensor::randn(vec![3, 3, cin, cout], std, rng))?;
            store.insert(b.clone(), Tensor::zeros(vec![cout]))?;
            Ok((w, b))
        };
        let conv1 = conv("conv1", in_channels, c1)?;
        let conv2 = conv("conv2", c1, c2)?;
        Ok(ImageEncoder {
            in_channels,
            conv1,
            conv2,
            head: Linear::init(store, &format!("{name}.head"), c2, d_img, true, rng)?,
        })
    }

    pub fn width(&self) -> usize {
        self.head.d_out
    }

    /// Pooled features before the affine head: `[K, H, W, c]` → `[K, 16]`.
    pub fn pooled(&self, g: &Graph, images: &Var) -> Result<Var> {
        let s = images.shape();
        if s.len() != 4 || s[1..].contains(&0) || s[3] != self.in_channels {
            return Err(CstpError::shape(format!(
                "image encoder expects [K, H, W, {}] with positive extents, got {s:?}",
                self.in_channels
            )));
        }
        let h = g.conv2d(images, &g.param(&self.conv1.0)?, &g.param(&self.conv1.1)?, 2, 1)?;
        let h = g.relu(&h);
        let h = g.conv2d(&h, &g.param(&self.conv2.0)?, &g.param(&self.conv2.1)?, 2, 1)?;
        let h = g.relu(&h);
        let hs = h.shape().to_vec();
        let flat = g.reshape(&h, vec![hs[0], hs[1] * hs[2], hs[3]])?;
        g.mean_axis(&flat, 1)
    }

    /// `[K, H, W, c]` → `[K, d_img]`.
    pub fn forward(&self, g: &Graph, images: &Var) -> Result<Var> {
        let pooled = self.pooled(g, images)?;
        self.head.forward(g, &pooled)
    }

    pub fn encode(&self, store: &ParamStore, pixels: &Tensor) -> Result<Tensor> {
        let s = pixels.shape().to_vec();
        if s.len() != 3 {
            return Err(CstpError::shape(format!("image must be [H, W, c], got {s:?}")));
        }
        let g = Graph::inference(store);
        let x = g.constant(pixels.reshape(vec![1, s[0], s[1], s[2]])?);
        let y = self.forward(&g, &x)?;
        y.value().reshape(vec![self.width()])
    }
}
