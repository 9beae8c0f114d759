//! Self-describing binary checkpoints.
//!
//! Layout (little-endian): the 8-byte magic `CSTPCKPT`, a `u32` format
//! version, the completed epoch as `u64`, the data extents (nodes,
//! channels, image channels) as `u64`s, the training config as
//! length-prefixed TOML, then a `u64` tensor count followed by tensors
//! (`u32` name length, name, `u32` rank, `u64` extents, `f64` values).
//! Normalisation statistics and graph matrices are stored as tensors under
//! reserved `__` names.

use std::io::{Read, Write};
use std::path::Path;

use crate::align::NormStats;
use crate::autodiff::ParamStore;
use crate::causal_graph::HybridGraph;
use crate::error::{CstpError, Result};
use crate::tensor::Tensor;
use crate::train::{DataDims, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CSTPCKPT";
pub const VERSION: u32 = 1;

const NORM_MEAN: &str = "__norm.mean";
const NORM_STD: &str = "__norm.std";
const GRAPH_PRIOR: &str = "__graph.prior";
const GRAPH_SHAP: &str = "__graph.shap";
const GRAPH_CURRENT: &str = "__graph.current";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &e in t.shape() {
        put_u64(out, e as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, state.epoch as u64);
    for d in [state.dims.nodes, state.dims.channels, state.dims.image_channels] {
        put_u64(&mut out, d as u64);
    }
    let cfg = state.config.to_toml();
    put_u64(&mut out, cfg.len() as u64);
    out.extend_from_slice(cfg.as_bytes());
    let extra = [
        (NORM_MEAN, &state.norm.mean),
        (NORM_STD, &state.norm.std),
        (GRAPH_PRIOR, &state.graph.prior),
        (GRAPH_SHAP, &state.graph.shap),
        (GRAPH_CURRENT, &state.graph.current),
    ];
    put_u64(&mut out, (state.params.len() + extra.len()) as u64);
    for (name, t) in state.params.iter() {
        put_tensor(&mut out, name, t);
    }
    for (name, t) in extra {
        put_tensor(&mut out, name, t);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CstpError::parse(self.origin, format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| CstpError::parse(self.origin, format!("implausible length {v} in checkpoint")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CstpError::parse(self.origin, "checkpoint string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = self.string(name_len)?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.len()?);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let numel = numel
            .filter(|&n| n <= self.bytes.len() / 8)
            .ok_or_else(|| CstpError::parse(self.origin, format!("implausible shape {shape:?} for {name}")))?;
        let raw = self.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<TrainState> {
    let mut c = Cursor { bytes, pos: 0, origin };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(CstpError::parse(origin, "not a checkpoint (bad magic bytes)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CstpError::Version {
            what: origin.display().to_string(),
            found: version,
            supported: VERSION,
        });
    }
    let epoch = c.len()?;
    let dims = DataDims {
        nodes: c.len()?,
        channels: c.len()?,
        image_channels: c.len()?,
    };
    let cfg_len = c.len()?;
    let config = TrainConfig::from_toml(&c.string(cfg_len)?, origin)?;
    let count = c.len()?;
    let mut params = ParamStore::new();
    let mut extra = std::collections::BTreeMap::new();
    for _ in 0..count {
        let (name, t) = c.tensor()?;
        if name.starts_with("__") {
            extra.insert(name, t);
        } else {
            params.insert(name, t)?;
        }
    }
    if c.pos != bytes.len() {
        return Err(CstpError::parse(origin, "trailing bytes after checkpoint payload"));
    }
    let mut take = |name: &str| {
        extra
            .remove(name)
            .ok_or_else(|| CstpError::parse(origin, format!("checkpoint lacks {name}")))
    };
    let norm = NormStats {
        mean: take(NORM_MEAN)?,
        std: take(NORM_STD)?,
    };
    let mut graph = HybridGraph::new(take(GRAPH_PRIOR)?, config.lambda, config.ema_momentum, config.refresh_period)?;
    graph.shap = take(GRAPH_SHAP)?;
    graph.current = take(GRAPH_CURRENT)?;
    let state = TrainState {
        config,
        dims,
        params,
        norm,
        graph,
        epoch,
    };
    state.model()?;
    Ok(state)
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CstpError::io(path, e))?;
    f.write_all(&encode(state)).map_err(|e| CstpError::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CstpError::io(path, e))?;
    decode(&bytes, path)
}
