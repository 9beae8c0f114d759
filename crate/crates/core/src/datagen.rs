//! Synthetic confounded multi-modal datasets with a known latent
//! confounder, and the prior-graph generators.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageObservation, MultiModalDataset, StSeries, TextObservation};
use crate::error::{CstpError, Result};
use crate::sted::normalized_adjacency;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphKind {
    /// 4-neighbour lattice on the most square factorisation of `N`.
    Grid,
    /// Points in the unit square joined when closer than `radius`.
    RandomGeometric,
}

/// Adjacency plus the node positions it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedGraph {
    pub adjacency: Tensor,
    pub coords: Vec<[f64; 2]>,
}

/// Attempts before a disconnected random-geometric draw is an error.
pub const MAX_GRAPH_ATTEMPTS: usize = 100;

pub fn gen_graph(nodes: usize, kind: GraphKind, radius: f64, seed: u64) -> Result<GeneratedGraph> {
    if nodes < 2 {
        return Err(CstpError::invalid(format!("graph generation needs N >= 2, got {nodes}")));
    }
    match kind {
        GraphKind::Grid => Ok(grid(nodes)),
        GraphKind::RandomGeometric => {
            if !(radius > 0.0) || !radius.is_finite() {
                return Err(CstpError::invalid(format!("radius must be positive, got {radius}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..MAX_GRAPH_ATTEMPTS {
                let coords: Vec<[f64; 2]> = (0..nodes).map(|_| [rng.random(), rng.random()]).collect();
                let mut a = Tensor::zeros(vec![nodes, nodes]);
                for i in 0..nodes {
                    for j in 0..nodes {
                        let d = ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)).sqrt();
                        if i != j && d < radius {
                            a.set(&[i, j], 1.0);
                        }
                    }
                }
                if connected(&a) {
                    return Ok(GeneratedGraph { adjacency: a, coords });
                }
            }
            Err(CstpError::invalid(format!(
                "no connected random-geometric graph with N={nodes}, radius={radius} in {MAX_GRAPH_ATTEMPTS} attempts"
            )))
        }
    }
}

fn grid(nodes: usize) -> GeneratedGraph {
    let rows = (1..=nodes).filter(|r| nodes.is_multiple_of(*r) && r * r <= nodes).max().unwrap_or(1);
    let cols = nodes / rows;
    let mut a = Tensor::zeros(vec![nodes, nodes]);
    let mut coords = Vec::with_capacity(nodes);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            coords.push([(c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64]);
            if c + 1 < cols {
                a.set(&[i, i + 1], 1.0);
                a.set(&[i + 1, i], 1.0);
            }
            if r + 1 < rows {
                a.set(&[i, i + cols], 1.0);
                a.set(&[i + cols, i], 1.0);
            }
        }
    }
    GeneratedGraph { adjacency: a, coords }
}

fn connected(a: &Tensor) -> bool {
    let n = a.shape()[0];
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for j in 0..n {
            if !seen[j] && a.at(&[i, j]) > 0.0 {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmConfig {
    pub nodes: usize,
    pub steps: usize,
    pub graph: GraphKind,
    pub radius: f64,
    /// Weight of the latent confounder in the series recursion.
    pub kappa: f64,
    /// Standard deviation of the additive observation noise.
    pub noise: f64,
    /// Probability of an event in each step.
    pub event_rate: f64,
    pub image_height: usize,
    pub image_width: usize,
    /// Number of drifting bumps in the image field; 0 gives a flat field.
    pub bumps: usize,
    /// Weight of the local field value in the recursion.
    pub field_weight: f64,
    /// Weight of the event pulses in the recursion.
    pub event_weight: f64,
    /// Self-coupling of the graph-smoothed previous state.
    pub coupling: f64,
    /// Seconds between series samples.
    pub step_seconds: f64,
    pub seed: u64,
    /// Separate seed for the confounder trace; defaults to `seed`.
    pub confounder_seed: Option<u64>,
}

impl Default for ScmConfig {
    fn default() -> Self {
        ScmConfig {
            nodes: 9,
            steps: 400,
            graph: GraphKind::Grid,
            radius: 0.5,
            kappa: 0.8,
            noise: 0.05,
            event_rate: 0.15,
            image_height: 8,
            image_width: 8,
            bumps: 3,
            field_weight: 3.0,
            event_weight: 5.0,
            coupling: 0.6,
            step_seconds: 300.0,
            seed: 0,
            confounder_seed: None,
        }
    }
}

/// AR(1) coefficient of the latent confounder.
pub const CONFOUNDER_AR: f64 = 0.9;
/// Steps simulated and discarded before the first stored sample.
pub const BURN_IN: usize = 50;
/// Number of distinct event codes.
pub const EVENT_CODES: usize = 4;
const EVENT_AMPLITUDE: [f64; EVENT_CODES] = [1.0, -1.0, 0.7, -0.7];
/// Steps between an event and the peak of its pulse, per code.
const EVENT_LAG: [usize; EVENT_CODES] = [2, 4, 6, 8];
/// Triangular pulse around the peak.
const PULSE_SHAPE: [f64; 3] = [0.5, 1.0, 0.5];
const BUMP_WIDTH: f64 = 0.25;
const BUMP_SPEED: f64 = 0.005;
/// Side length of the square imaged around each node.
const IMAGE_SPAN: f64 = 0.25;

impl ScmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 2 || self.steps < 1 {
            return Err(CstpError::invalid("need at least 2 nodes and 1 step"));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(CstpError::invalid(format!("kappa must lie in [0, 1], got {}", self.kappa)));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.event_rate) {
            return Err(CstpError::invalid("noise must be >= 0 and event_rate in [0, 1]"));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(CstpError::invalid("image extents must be >= 1"));
        }
        if !(self.step_seconds > 0.0) {
            return Err(CstpError::invalid("step_seconds must be positive"));
        }
        for (k, v) in [
            ("field_weight", self.field_weight),
            ("event_weight", self.event_weight),
            ("coupling", self.coupling),
        ] {
            if !v.is_finite() {
                return Err(CstpError::invalid(format!("{k} must be finite")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ScmConfig = toml::from_str(text).map_err(|e| CstpError::parse(origin, e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CstpError::io(path, e))?;
        Self::from_toml(&text, path)
    }
}

/// Independent random streams so that switching one component off leaves
/// the others unchanged.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Bump {
    center: [f64; 2],
    velocity: [f64; 2],
    amplitude: f64,
}

struct Field {
    bumps: Vec<Bump>,
    total: f64,
}

impl Field {
    fn new<R: Rng>(count: usize, rng: &mut R) -> Self {
        let bumps: Vec<Bump> = (0..count)
            .map(|_| {
                let angle = rng.random::<f64>() * std::f64::consts::TAU;
                Bump {
                    center: [rng.random(), rng.random()],
                    velocity: [BUMP_SPEED * angle.cos(), BUMP_SPEED * angle.sin()],
                    amplitude: 0.5 + 0.5 * rng.random::<f64>(),
                }
            })
            .collect();
        let total = bumps.iter().map(|b| b.amplitude).sum();
        Field { bumps, total }
    }

    /// Field value in `[0, 1]`.
    fn at(&self, p: [f64; 2]) -> f64 {
        if self.bumps.is_empty() {
            return 0.0;
        }
        let v: f64 = self
            .bumps
            .iter()
            .map(|b| {
                let d2 = (p[0] - b.center[0]).powi(2) + (p[1] - b.center[1]).powi(2);
                b.amplitude * (-d2 / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
            })
            .sum();
        v / self.total
    }

    /// Moves every bump, reflecting off the unit-square edges.
    fn advance(&mut self) {
        for b in &mut self.bumps {
            for k in 0..2 {
                b.center[k] += b.velocity[k];
                if !(0.0..=1.0).contains(&b.center[k]) {
                    b.velocity[k] = -b.velocity[k];
                    b.center[k] = b.center[k].clamp(0.0, 1.0);
                }
            }
        }
    }

    fn image(&self, center: [f64; 2], h: usize, w: usize) -> Tensor {
        let mut px = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let dx = ((j as f64 + 0.5) / w as f64 - 0.5) * IMAGE_SPAN;
                let dy = ((i as f64 + 0.5) / h as f64 - 0.5) * IMAGE_SPAN;
                px.push(self.at([center[0] + dx, center[1] + dy]).clamp(0.0, 1.0));
            }
        }
        Tensor::new(vec![h, w, 1], px).expect("image buffer sized from its shape")
    }
}

/// Simulates the confounded system and renders its observations.
///
/// Per node `n`: `S` is AR(1) with unit innovations; `X[t+1] =
/// tanh(coupling·(Â·X[t])[n] + κ·S[t+1][n] + w_E·field_n(t+1) +
/// w_C·g_n·pulse(t+1)) + σ·ε`. Events emitted at rate `event_rate` carry a
/// code whose pulse peaks a code-specific number of steps later.
pub fn gen_scm(config: &ScmConfig) -> Result<MultiModalDataset> {
    config.validate()?;
    let n = config.nodes;
    let graph = gen_graph(n, config.graph, config.radius, config.seed)?;
    let a_hat = normalized_adjacency(&graph.adjacency)?;
    let mut s_rng = stream(config.confounder_seed.unwrap_or(config.seed), 1);
    let mut field_rng = stream(config.seed, 2);
    let mut event_rng = stream(config.seed, 3);
    let mut noise_rng = stream(config.seed, 4);

    let mut field = Field::new(config.bumps, &mut field_rng);
    let gains: Vec<f64> = (0..n).map(|_| 0.5 + event_rng.random::<f64>()).collect();
    let total = BURN_IN + config.steps;
    let horizon = EVENT_LAG[EVENT_CODES - 1] + PULSE_SHAPE.len();
    let mut pulse = vec![0.0; total + horizon];

    let stationary = (1.0 / (1.0 - CONFOUNDER_AR * CONFOUNDER_AR)).sqrt();
    let mut s: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut s_rng);
            stationary * z
        })
        .collect();
    let mut x = vec![0.0; n];

    let mut values = Vec::with_capacity(config.steps * n);
    let mut s_true = Vec::with_capacity(config.steps * n);
    let mut text = Vec::new();
    let mut images = Vec::new();
    let time_of = |k: usize| k as f64 * config.step_seconds;

    for step in 0..total {
        if step > 0 {
            for v in s.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut s_rng);
                *v = CONFOUNDER_AR * *v + e;
            }
            field.advance();
            let mut next = vec![0.0; n];
            for i in 0..n {
                let smoothed: f64 = (0..n).map(|j| a_hat.at(&[i, j]) * x[j]).sum();
                let drive = config.coupling * smoothed
                    + config.kappa * s[i]
                    + config.field_weight * field.at(graph.coords[i])
                    + config.event_weight * gains[i] * pulse[step];
                let e: f64 = StandardNormal.sample(&mut noise_rng);
                next[i] = drive.tanh() + config.noise * e;
            }
            x = next;
        }
        // Events at this step shape the pulses of later steps.
        let event = event_rng.random::<f64>() < config.event_rate;
        let code = event_rng.random_range(0..EVENT_CODES);
        let jitter = event_rng.random::<f64>() * 0.3 * config.step_seconds;
        if event {
            let peak = step + EVENT_LAG[code];
            for (k, w) in PULSE_SHAPE.iter().enumerate() {
                pulse[peak + k - 1] += EVENT_AMPLITUDE[code] * w;
            }
        }
        if step < BURN_IN {
            continue;
        }
        let k = step - BURN_IN;
        values.extend_from_slice(&x);
        s_true.extend_from_slice(&s);
        if event {
            let last = time_of(config.steps - 1);
            text.push(TextObservation {
                timestamp: (time_of(k) + jitter).min(last),
                tokens: vec!["event".to_string(), format!("code{code}")],
            });
        }
        for &c in &graph.coords {
            images.push(ImageObservation {
                timestamp: time_of(k),
                coords: c,
                pixels: field.image(c, config.image_height, config.image_width),
            });
        }
    }

    let series = StSeries::new(
        (0..config.steps).map(time_of).collect(),
        graph.coords.clone(),
        Tensor::new(vec![config.steps, n, 1], values)?,
    )?;
    let data = MultiModalDataset {
        series,
        text,
        images,
        graph: graph.adjacency,
        s_true: Some(Tensor::new(vec![config.steps, n], s_true)?),
    };
    data.validate()?;
    Ok(data)
}

/// Pearson correlation between two equally long samples.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degrees(a: &Tensor) -> Vec<usize> {
        let n = a.shape()[0];
        let mut d: Vec<usize> = (0..n)
            .map(|i| (0..n).filter(|&j| a.at(&[i, j]) > 0.0).count())
            .collect();
        d.sort_unstable();
        d
    }

    #[test]
    fn grid_degrees() {
        assert_eq!(degrees(&gen_graph(4, GraphKind::Grid, 0.0, 0).unwrap().adjacency), vec![2; 4]);
        assert_eq!(
            degrees(&gen_graph(9, GraphKind::Grid, 0.0, 0).unwrap().adjacency),
            vec![2, 2, 2, 2, 3, 3, 3, 3, 4]
        );
    }

    #[test]
    fn large_radius_gives_complete_graph() {
        let g = gen_graph(6, GraphKind::RandomGeometric, 2f64.sqrt() + 1e-9, 3).unwrap();
        assert_eq!(degrees(&g.adjacency), vec![5; 6]);
    }

    #[test]
    fn tiny_radius_fails_after_retries() {
        assert!(gen_graph(10, GraphKind::RandomGeometric, 1e-6, 0).is_err());
    }
}
