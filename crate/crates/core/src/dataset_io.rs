//! Plain-text dataset directory.
//!
//! ```text
//! meta     key = value lines: format_version, nodes, steps, channels,
//!          image_height/width/channels (0 without images), node.<i> = x y
//! series   CSV with header time,node,channel,value, one row per entry
//! graph    N lines of N comma-separated adjacency entries
//! text     one observation per line: timestamp token token ...
//! images   one observation per line: timestamp,x,y,pixel,pixel,...
//! s_true   optional; T lines of N comma-separated confounder values
//! ```
//!
//! Reals are written in shortest round-trip form, so a write/read cycle is
//! bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{ImageObservation, MultiModalDataset, StSeries, TextObservation};
use crate::error::{CstpError, Result};
use crate::tensor::Tensor;

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_MINOR: u32 = 0;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CstpError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CstpError::io(path, e))
}

fn number<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| CstpError::parse(path, format!("line {line}: cannot parse {field:?} as a number")))
}

/// Data lines with their 1-based numbers, skipping blanks and `#` comments.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

#[derive(Debug)]
struct Meta {
    nodes: usize,
    steps: usize,
    channels: usize,
    image: [usize; 3],
    coords: Vec<[f64; 2]>,
}

fn parse_meta(path: &Path) -> Result<Meta> {
    let text = read(path)?;
    let mut kv = BTreeMap::new();
    for (ln, line) in lines(&text) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CstpError::parse(path, format!("line {ln}: expected key = value")))?;
        kv.insert(k.trim().to_string(), (ln, v.trim().to_string()));
    }
    let get = |key: &str| -> Result<&(usize, String)> {
        kv.get(key)
            .ok_or_else(|| CstpError::parse(path, format!("missing key {key}")))
    };
    let (ln, version) = get("format_version")?;
    let major: u32 = number(path, *ln, version.split('.').next().unwrap_or(""))?;
    if major != FORMAT_MAJOR {
        return Err(CstpError::Version {
            what: path.display().to_string(),
            found: major,
            supported: FORMAT_MAJOR,
        });
    }
    let count = |key: &str| -> Result<usize> {
        let (ln, v) = get(key)?;
        number(path, *ln, v)
    };
    let nodes = count("nodes")?;
    let mut coords = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let (ln, v) = get(&format!("node.{i}"))?;
        let xy: Vec<&str> = v.split_whitespace().collect();
        if xy.len() != 2 {
            return Err(CstpError::parse(path, format!("line {ln}: node.{i} needs two coordinates")));
        }
        coords.push([number(path, *ln, xy[0])?, number(path, *ln, xy[1])?]);
    }
    Ok(Meta {
        nodes,
        steps: count("steps")?,
        channels: count("channels")?,
        image: [count("image_height")?, count("image_width")?, count("image_channels")?],
        coords,
    })
}

fn parse_matrix(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let text = read(path)?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (ln, line) in lines(&text) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(CstpError::parse(path, format!("line {ln}: expected {cols} values, found {}", fields.len())));
        }
        for f in fields {
            data.push(number(path, ln, f)?);
        }
        seen += 1;
    }
    if seen != rows {
        return Err(CstpError::parse(path, format!("expected {rows} rows, found {seen}")));
    }
    Tensor::new(vec![rows, cols], data)
}

fn parse_series(path: &Path, meta: &Meta) -> Result<(Vec<f64>, Tensor)> {
    let (t_len, n, c) = (meta.steps, meta.nodes, meta.channels);
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CstpError::parse(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| CstpError::parse(path, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["time", "node", "channel", "value"] {
        return Err(CstpError::parse(path, "header must be time,node,channel,value"));
    }
    let mut times = vec![f64::NAN; t_len];
    let mut filled = vec![false; t_len * n * c];
    let mut values = vec![0.0; t_len * n * c];
    let mut step = 0usize;
    let mut last_time = f64::NAN;
    for (i, rec) in reader.records().enumerate() {
        let ln = i + 2;
        let rec = rec.map_err(|e| CstpError::parse(path, format!("line {ln}: {e}")))?;
        if rec.len() != 4 {
            return Err(CstpError::parse(path, format!("line {ln}: expected 4 fields")));
        }
        let time: f64 = number(path, ln, &rec[0])?;
        let node: usize = number(path, ln, &rec[1])?;
        let ch: usize = number(path, ln, &rec[2])?;
        let value: f64 = number(path, ln, &rec[3])?;
        if node >= n || ch >= c {
            return Err(CstpError::parse(path, format!("line {ln}: node {node} or channel {ch} out of range")));
        }
        if time != last_time {
            if !last_time.is_nan() {
                step += 1;
            }
            if step >= t_len {
                return Err(CstpError::parse(path, format!("line {ln}: more than {t_len} distinct timestamps")));
            }
            times[step] = time;
            last_time = time;
        }
        let k = (step * n + node) * c + ch;
        if filled[k] {
            return Err(CstpError::parse(path, format!("line {ln}: duplicate entry")));
        }
        filled[k] = true;
        values[k] = value;
    }
    if let Some(k) = filled.iter().position(|f| !f) {
        return Err(CstpError::parse(
            path,
            format!("missing entry for step {}, node {}, channel {} (truncated file?)", k / (n * c), k / c % n, k % c),
        ));
    }
    Ok((times, Tensor::new(vec![t_len, n, c], values)?))
}

fn parse_text(path: &Path) -> Result<Vec<TextObservation>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (ln, line) in lines(&text) {
        let mut parts = line.split_whitespace();
        let ts = parts.next().unwrap_or_default();
        let tokens: Vec<String> = parts.map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(CstpError::parse(path, format!("line {ln}: observation has no tokens")));
        }
        out.push(TextObservation {
            timestamp: number(path, ln, ts)?,
            tokens,
        });
    }
    Ok(out)
}

fn parse_images(path: &Path, shape: [usize; 3]) -> Result<Vec<ImageObservation>> {
    let text = read(path)?;
    let px = shape.iter().product::<usize>();
    let mut out = Vec::new();
    for (ln, line) in lines(&text) {
        if px == 0 {
            return Err(CstpError::parse(path, format!("line {ln}: images present but meta declares no image shape")));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + px {
            return Err(CstpError::parse(
                path,
                format!("line {ln}: expected {} fields, found {}", 3 + px, fields.len()),
            ));
        }
        let mut nums = Vec::with_capacity(fields.len());
        for f in fields {
            nums.push(number::<f64>(path, ln, f)?);
        }
        out.push(ImageObservation {
            timestamp: nums[0],
            coords: [nums[1], nums[2]],
            pixels: Tensor::new(shape.to_vec(), nums[3..].to_vec())?,
        });
    }
    Ok(out)
}

/// Reads and validates a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<MultiModalDataset> {
    let file = |name: &str| -> PathBuf { dir.join(name) };
    let meta = parse_meta(&file("meta"))?;
    let (times, values) = parse_series(&file("series"), &meta)?;
    let graph = parse_matrix(&file("graph"), meta.nodes, meta.nodes)?;
    let text = parse_text(&file("text"))?;
    let images = parse_images(&file("images"), meta.image)?;
    let s_path = file("s_true");
    let s_true = if s_path.exists() {
        Some(parse_matrix(&s_path, meta.steps, meta.nodes)?)
    } else {
        None
    };
    let data = MultiModalDataset {
        series: StSeries {
            timestamps: times,
            coords: meta.coords,
            values,
        },
        text,
        images,
        graph,
        s_true,
    };
    data.validate()?;
    Ok(data)
}

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").expect("writing to a String");
    }
    s
}

/// Writes `data` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &MultiModalDataset) -> Result<()> {
    data.validate()?;
    fs::create_dir_all(dir).map_err(|e| CstpError::io(dir, e))?;
    let (t_len, n, c) = (data.series.len(), data.series.nodes(), data.series.channels());
    let image = data.image_shape().unwrap_or([0, 0, 0]);

    let mut meta = format!("format_version = {FORMAT_MAJOR}.{FORMAT_MINOR}\n");
    writeln!(meta, "nodes = {n}\nsteps = {t_len}\nchannels = {c}").unwrap();
    writeln!(
        meta,
        "image_height = {}\nimage_width = {}\nimage_channels = {}",
        image[0], image[1], image[2]
    )
    .unwrap();
    for (i, p) in data.series.coords.iter().enumerate() {
        writeln!(meta, "node.{i} = {} {}", p[0], p[1]).unwrap();
    }
    write(&dir.join("meta"), &meta)?;

    let mut series = String::from("time,node,channel,value\n");
    let v = data.series.values.data();
    for (t, ts) in data.series.timestamps.iter().enumerate() {
        for node in 0..n {
            for ch in 0..c {
                writeln!(series, "{ts},{node},{ch},{}", v[(t * n + node) * c + ch]).unwrap();
            }
        }
    }
    write(&dir.join("series"), &series)?;

    let rows = |m: &Tensor, cols: usize| -> String {
        m.data().chunks(cols).map(|r| join(r) + "\n").collect()
    };
    write(&dir.join("graph"), &rows(&data.graph, n))?;

    let mut text = String::new();
    for o in &data.text {
        writeln!(text, "{} {}", o.timestamp, o.tokens.join(" ")).unwrap();
    }
    write(&dir.join("text"), &text)?;

    let mut images = String::new();
    for o in &data.images {
        writeln!(images, "{},{},{},{}", o.timestamp, o.coords[0], o.coords[1], join(o.pixels.data())).unwrap();
    }
    write(&dir.join("images"), &images)?;

    let s_path = dir.join("s_true");
    match &data.s_true {
        Some(s) => write(&s_path, &rows(s, n))?,
        None if s_path.exists() => fs::remove_file(&s_path).map_err(|e| CstpError::io(&s_path, e))?,
        None => {}
    }
    Ok(())
}
