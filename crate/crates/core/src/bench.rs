//! Forward-pass timing of the temporal encoders across sequence lengths
//! and node counts.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::error::{CstpError, Result};
use crate::sted::{StedConfig, Temporal, TemporalKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchEncoder {
    StedMamba,
    StedAttention,
}

impl BenchEncoder {
    pub fn name(self) -> &'static str {
        match self {
            BenchEncoder::StedMamba => "sted-mamba",
            BenchEncoder::StedAttention => "sted-attention",
        }
    }

    fn kind(self) -> TemporalKind {
        match self {
            BenchEncoder::StedMamba => TemporalKind::Mamba,
            BenchEncoder::StedAttention => TemporalKind::Attention,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchPlan {
    pub encoders: Vec<BenchEncoder>,
    pub t_values: Vec<usize>,
    pub n_values: Vec<usize>,
    pub runs: usize,
    pub warmup: usize,
    pub batch: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan {
            encoders: vec![BenchEncoder::StedMamba, BenchEncoder::StedAttention],
            t_values: vec![64, 128, 256, 512],
            n_values: vec![16, 32, 64],
            runs: 5,
            warmup: 2,
            batch: 4,
            width: 32,
            seed: 0,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 3 {
            return Err(CstpError::invalid(format!(
                "runs must be >= 3 so a median exists, got {}",
                self.runs
            )));
        }
        if self.encoders.is_empty() || self.t_values.is_empty() || self.n_values.is_empty() {
            return Err(CstpError::invalid("plan needs at least one encoder, T and N"));
        }
        if self.t_values.iter().chain(&self.n_values).any(|&v| v == 0) || self.batch == 0 || self.width == 0 {
            return Err(CstpError::invalid("plan extents must be >= 1"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let plan: BenchPlan = toml::from_str(text).map_err(|e| CstpError::parse(origin, e.message()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CstpError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// Random input `[B, T, N, d]` for one cell; depends only on the plan
    /// seed and the cell extents.
    pub fn input(&self, t: usize, n: usize) -> Tensor {
        let cell_seed = self.seed ^ ((t as u64) << 32) ^ (n as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
        Tensor::randn(vec![self.batch, t, n, self.width], 1.0, &mut rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchCell {
    pub encoder: BenchEncoder,
    pub batch: usize,
    pub t: usize,
    pub n: usize,
    pub width: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
    /// Log-log slope of median time against `T`, per encoder.
    pub slopes: Vec<(BenchEncoder, f64)>,
}

impl BenchReport {
    pub fn slope(&self, encoder: BenchEncoder) -> Option<f64> {
        self.slopes.iter().find(|(e, _)| *e == encoder).map(|(_, s)| *s)
    }

    pub fn cell(&self, encoder: BenchEncoder, t: usize, n: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.encoder == encoder && c.t == t && c.n == n)
    }
}

/// Nearest-rank percentile of an ascending sample.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn time_cell(plan: &BenchPlan, encoder: BenchEncoder, t: usize, n: usize) -> Result<BenchCell> {
    let config = StedConfig {
        width: plan.width,
        ..StedConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let block = Temporal::init(&mut store, "bench", &config, encoder.kind(), &mut rng)?;
    let input = plan.input(t, n);
    let mut samples = Vec::with_capacity(plan.runs);
    for i in 0..plan.warmup + plan.runs {
        let g = Graph::inference(&store);
        let x = g.constant(input.clone());
        let start = Instant::now();
        let y = block.forward(&g, &x)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(y.value().data()[0]);
        if i >= plan.warmup {
            samples.push(elapsed);
        }
    }
    samples.sort_by(f64::total_cmp);
    let cell = BenchCell {
        encoder,
        batch: plan.batch,
        t,
        n,
        width: plan.width,
        median_ms: median(&samples),
        p90_ms: percentile(&samples, 90.0),
        runs: plan.runs,
    };
    info!("{} T={t} N={n}: median {:.2} ms", encoder.name(), cell.median_ms);
    Ok(cell)
}

/// Times every cell sequentially and fits the per-encoder slope in `T` as
/// the mean of the per-`N` fits.
pub fn run_bench(plan: &BenchPlan) -> Result<BenchReport> {
    plan.validate()?;
    let mut cells = Vec::new();
    for &encoder in &plan.encoders {
        for &n in &plan.n_values {
            for &t in &plan.t_values {
                cells.push(time_cell(plan, encoder, t, n)?);
            }
        }
    }
    let mut slopes = Vec::new();
    for &encoder in &plan.encoders {
        let fits: Vec<f64> = plan
            .n_values
            .iter()
            .filter_map(|&n| {
                let pts: Vec<(f64, f64)> = cells
                    .iter()
                    .filter(|c| c.encoder == encoder && c.n == n)
                    .map(|c| (c.t as f64, c.median_ms))
                    .collect();
                loglog_slope(&pts)
            })
            .collect();
        if !fits.is_empty() {
            slopes.push((encoder, fits.iter().sum::<f64>() / fits.len() as f64));
        }
    }
    Ok(BenchReport { cells, slopes })
}

pub const CSV_HEADER: [&str; 9] = ["encoder", "B", "T", "N", "d", "median_ms", "p90_ms", "runs", "slope_T"];

/// Timing rows followed by one `slope_T` summary row per encoder.
pub fn write_csv<W: Write>(out: W, report: &BenchReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| CstpError::data(format!("writing benchmark table: {e}"));
    w.write_record(CSV_HEADER).map_err(err)?;
    for c in &report.cells {
        w.write_record([
            c.encoder.name().to_string(),
            c.batch.to_string(),
            c.t.to_string(),
            c.n.to_string(),
            c.width.to_string(),
            format!("{:.4}", c.median_ms),
            format!("{:.4}", c.p90_ms),
            c.runs.to_string(),
            String::new(),
        ])
        .map_err(err)?;
    }
    for (e, s) in &report.slopes {
        let mut row = vec![e.name().to_string()];
        row.extend(std::iter::repeat_n(String::new(), 7));
        row.push(format!("{s:.4}"));
        w.write_record(row).map_err(err)?;
    }
    w.flush().map_err(|e| CstpError::data(format!("writing benchmark table: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [64.0, 128.0, 256.0].iter().map(|&t: &f64| (t, 3.0 * t.powi(2))).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn order_statistics() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(median(&s), 3.0);
        assert_eq!(percentile(&s, 90.0), 5.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
    }

    #[test]
    fn runs_below_three_rejected() {
        let plan = BenchPlan {
            runs: 1,
            ..Default::default()
        };
        assert!(plan.validate().is_err());
    }
}
