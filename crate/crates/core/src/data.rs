//! In-memory representation of a multi-modal spatio-temporal dataset.

use crate::error::{CstpError, Result};
use crate::tensor::Tensor;

/// Regularly or irregularly sampled node series.
#[derive(Clone, Debug, PartialEq)]
pub struct StSeries {
    /// Strictly increasing sample times in seconds.
    pub timestamps: Vec<f64>,
    /// Planar node positions.
    pub coords: Vec<[f64; 2]>,
    /// `[T, N, d]` values.
    pub values: Tensor,
}

impl StSeries {
    pub fn new(timestamps: Vec<f64>, coords: Vec<[f64; 2]>, values: Tensor) -> Result<Self> {
        let s = StSeries {
            timestamps,
            coords,
            values,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let sh = self.values.shape();
        if sh.len() != 3 {
            return Err(CstpError::data(format!("series values must be [T, N, d], got {sh:?}")));
        }
        if sh[0] != self.timestamps.len() || sh[1] != self.coords.len() {
            return Err(CstpError::data(format!(
                "series values {sh:?} disagree with {} timestamps and {} node coordinates",
                self.timestamps.len(),
                self.coords.len()
            )));
        }
        if let Some(w) = self.timestamps.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(CstpError::data(format!(
                "timestamps must be strictly increasing (index {})",
                w + 1
            )));
        }
        if !self.values.all_finite() || self.timestamps.iter().any(|t| !t.is_finite()) {
            return Err(CstpError::data("series contains non-finite values"));
        }
        if self.coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(CstpError::data("node coordinates must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// `(first, last)` timestamp.
    pub fn time_range(&self) -> Option<(f64, f64)> {
        Some((*self.timestamps.first()?, *self.timestamps.last()?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextObservation {
    pub timestamp: f64,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageObservation {
    pub timestamp: f64,
    pub coords: [f64; 2],
    /// `[H, W, c]` intensities in `[0, 1]`.
    pub pixels: Tensor,
}

impl ImageObservation {
    pub fn validate(&self) -> Result<()> {
        let s = self.pixels.shape();
        if s.len() != 3 || s.contains(&0) {
            return Err(CstpError::data(format!("image pixels must be [H, W, c] with positive extents, got {s:?}")));
        }
        if self.pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CstpError::data("image intensities must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Series plus auxiliary observations and the prior spatial graph.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalDataset {
    pub series: StSeries,
    pub text: Vec<TextObservation>,
    pub images: Vec<ImageObservation>,
    /// Prior adjacency `[N, N]`: symmetric, non-negative, zero diagonal.
    pub graph: Tensor,
    /// Latent confounder trace `[T, N]`, present for synthetic data only.
    pub s_true: Option<Tensor>,
}

impl MultiModalDataset {
    pub fn validate(&self) -> Result<()> {
        self.series.validate()?;
        let n = self.series.nodes();
        if self.graph.shape() != [n, n] {
            return Err(CstpError::data(format!(
                "graph must be {n}x{n}, got {:?}",
                self.graph.shape()
            )));
        }
        for i in 0..n {
            if self.graph.at(&[i, i]) != 0.0 {
                return Err(CstpError::data(format!("graph diagonal entry {i} is non-zero")));
            }
            for j in 0..n {
                let v = self.graph.at(&[i, j]);
                if !(v >= 0.0) || !v.is_finite() || v != self.graph.at(&[j, i]) {
                    return Err(CstpError::data(format!(
                        "graph must be symmetric, finite and non-negative (entry {i},{j})"
                    )));
                }
            }
        }
        let (lo, hi) = self.series.time_range().unwrap_or((0.0, 0.0));
        let in_range = |t: f64| t >= lo && t <= hi;
        for (i, obs) in self.text.iter().enumerate() {
            if obs.tokens.is_empty() || obs.tokens.iter().any(|t| t.is_empty() || t.contains(char::is_whitespace)) {
                return Err(CstpError::data(format!("text observation {i} needs non-empty whitespace-free tokens")));
            }
            if !in_range(obs.timestamp) {
                return Err(CstpError::data(format!(
                    "text observation {i} at {} lies outside the series range [{lo}, {hi}]",
                    obs.timestamp
                )));
            }
        }
        for (i, obs) in self.images.iter().enumerate() {
            obs.validate()
                .map_err(|e| CstpError::data(format!("image observation {i}: {e}")))?;
            if !in_range(obs.timestamp) || obs.coords.iter().any(|c| !c.is_finite()) {
                return Err(CstpError::data(format!(
                    "image observation {i} has an out-of-range timestamp or bad coordinates"
                )));
            }
        }
        if let Some(s) = &self.s_true {
            if s.shape() != [self.series.len(), n] {
                return Err(CstpError::data(format!(
                    "confounder trace must be [{}, {n}], got {:?}",
                    self.series.len(),
                    s.shape()
                )));
            }
        }
        Ok(())
    }

    /// Image shape shared by all observations, if any.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.images.first().map(|o| {
            let s = o.pixels.shape();
            [s[0], s[1], s[2]]
        })
    }
}
