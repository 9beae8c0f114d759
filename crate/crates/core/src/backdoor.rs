//! Discrete structural causal model over `(S, E, C, X, Y)` with exact
//! backdoor adjustment.
//!
//! The graph is `S ← (E, C)`, `X ← (S, E, C)`, `Y ← (X, S, E, C)`.
//!
//! Text format, one conditional entry per line (`#` starts a comment):
//!
//! ```text
//! cards <|S|> <|E|> <|C|> <|X|> <|Y|>
//! S <s> <e> <c> <prob>
//! X <x> <s> <e> <c> <prob>
//! Y <y> <x> <s> <e> <c> <prob>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{CstpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cards {
    pub s: usize,
    pub e: usize,
    pub c: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteScm {
    pub cards: Cards,
    /// `P(S | E, C)` indexed `[e][c][s]`.
    p_s: Vec<f64>,
    /// `P(X | S, E, C)` indexed `[s][e][c][x]`.
    p_x: Vec<f64>,
    /// `P(Y | X, S, E, C)` indexed `[x][s][e][c][y]`.
    p_y: Vec<f64>,
}

const ROW_TOL: f64 = 1e-12;

fn check_rows(name: &str, table: &[f64], width: usize) -> Result<()> {
    for (r, row) in table.chunks(width).enumerate() {
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CstpError::invalid(format!("{name} row {r} has a probability outside [0, 1]")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_TOL {
            return Err(CstpError::invalid(format!("{name} row {r} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

fn random_rows<R: Rng + ?Sized>(rows: usize, width: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..width).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let mut row: Vec<f64> = raw.iter().map(|v| v / total).collect();
        // Put the rounding residue on the largest entry so the row sums to 1.
        let resid = 1.0 - row.iter().sum::<f64>();
        let imax = (0..width).fold(0, |m, i| if row[i] > row[m] { i } else { m });
        row[imax] += resid;
        out.extend(row);
    }
    out
}

impl DiscreteScm {
    pub fn new(cards: Cards, p_s: Vec<f64>, p_x: Vec<f64>, p_y: Vec<f64>) -> Result<Self> {
        let Cards { s, e, c, x, y } = cards;
        if [s, e, c, x, y].contains(&0) {
            return Err(CstpError::invalid("all supports need at least one value"));
        }
        if p_s.len() != e * c * s || p_x.len() != s * e * c * x || p_y.len() != x * s * e * c * y {
            return Err(CstpError::invalid("conditional table sizes do not match the supports"));
        }
        check_rows("P(S|E,C)", &p_s, s)?;
        check_rows("P(X|S,E,C)", &p_x, x)?;
        check_rows("P(Y|X,S,E,C)", &p_y, y)?;
        Ok(DiscreteScm { cards, p_s, p_x, p_y })
    }

    /// Random tables with strictly positive entries.
    pub fn random<R: Rng + ?Sized>(cards: Cards, rng: &mut R) -> Result<Self> {
        let Cards { s, e, c, x, y } = cards;
        let p_s = random_rows(e * c, s, rng);
        let p_x = random_rows(s * e * c, x, rng);
        let p_y = random_rows(x * s * e * c, y, rng);
        DiscreteScm::new(cards, p_s, p_x, p_y)
    }

    pub fn p_s(&self, s: usize, e: usize, c: usize) -> f64 {
        let k = &self.cards;
        self.p_s[(e * k.c + c) * k.s + s]
    }

    pub fn p_x(&self, x: usize, s: usize, e: usize, c: usize) -> f64 {
        let k = &self.cards;
        self.p_x[((s * k.e + e) * k.c + c) * k.x + x]
    }

    pub fn p_y(&self, y: usize, x: usize, s: usize, e: usize, c: usize) -> f64 {
        let k = &self.cards;
        self.p_y[(((x * k.s + s) * k.e + e) * k.c + c) * k.y + y]
    }

    fn check_query(&self, x: usize, e: usize, c: usize) -> Result<()> {
        if x >= self.cards.x || e >= self.cards.e || c >= self.cards.c {
            return Err(CstpError::invalid(format!(
                "query (x={x}, e={e}, c={c}) is outside the supports {:?}",
                self.cards
            )));
        }
        Ok(())
    }

    /// `P(Y | do(X=x), E=e, C=c) = Σ_s P(Y | x, s, e, c)·P(s | e, c)`.
    pub fn backdoor_estimate(&self, x: usize, e: usize, c: usize) -> Result<Vec<f64>> {
        self.check_query(x, e, c)?;
        let mut out = vec![0.0; self.cards.y];
        for s in 0..self.cards.s {
            let w = self.p_s(s, e, c);
            for (y, o) in out.iter_mut().enumerate() {
                *o += self.p_y(y, x, s, e, c) * w;
            }
        }
        Ok(out)
    }

    /// Observational `P(Y | X=x, E=e, C=c)`.
    pub fn observational(&self, x: usize, e: usize, c: usize) -> Result<Vec<f64>> {
        self.check_query(x, e, c)?;
        let mut out = vec![0.0; self.cards.y];
        let mut norm = 0.0;
        for s in 0..self.cards.s {
            let w = self.p_s(s, e, c) * self.p_x(x, s, e, c);
            norm += w;
            for (y, o) in out.iter_mut().enumerate() {
                *o += self.p_y(y, x, s, e, c) * w;
            }
        }
        if norm == 0.0 {
            return Err(CstpError::invalid(format!("P(X={x} | e={e}, c={c}) is zero")));
        }
        out.iter_mut().for_each(|o| *o /= norm);
        Ok(out)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| CstpError::parse(origin, format!("line {line}: {msg}"));
        let mut cards: Option<Cards> = None;
        let mut tables: [Vec<Option<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (ln, raw) in text.lines().enumerate() {
            let ln = ln + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "cards" {
                let v: Vec<usize> = fields[1..]
                    .iter()
                    .map(|f| f.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(ln, format!("bad cardinality: {e}")))?;
                if v.len() != 5 || v.contains(&0) {
                    return Err(err(ln, "`cards` needs five positive sizes: S E C X Y".into()));
                }
                let k = Cards { s: v[0], e: v[1], c: v[2], x: v[3], y: v[4] };
                tables = [
                    vec![None; k.e * k.c * k.s],
                    vec![None; k.s * k.e * k.c * k.x],
                    vec![None; k.x * k.s * k.e * k.c * k.y],
                ];
                cards = Some(k);
                continue;
            }
            let k = cards.ok_or_else(|| err(ln, "`cards` must come before table rows".into()))?;
            let (slot, limits): (usize, Vec<usize>) = match fields[0] {
                "S" => (0, vec![k.s, k.e, k.c]),
                "X" => (1, vec![k.x, k.s, k.e, k.c]),
                "Y" => (2, vec![k.y, k.x, k.s, k.e, k.c]),
                other => return Err(err(ln, format!("unknown row kind `{other}`"))),
            };
            if fields.len() != limits.len() + 2 {
                return Err(err(ln, format!("expected {} fields", limits.len() + 2)));
            }
            let mut vals = Vec::with_capacity(limits.len());
            for (f, &lim) in fields[1..=limits.len()].iter().zip(&limits) {
                let v: usize = f.parse().map_err(|e| err(ln, format!("bad value `{f}`: {e}")))?;
                if v >= lim {
                    return Err(err(ln, format!("value {v} outside support of size {lim}")));
                }
                vals.push(v);
            }
            let prob: f64 = fields[limits.len() + 1]
                .parse()
                .map_err(|e| err(ln, format!("bad probability: {e}")))?;
            // Row-major over the parents, child value last.
            let (child, parents) = (vals[0], &vals[1..]);
            let plimits = &limits[1..];
            let mut idx = 0;
            for (v, l) in parents.iter().zip(plimits) {
                idx = idx * l + v;
            }
            idx = idx * limits[0] + child;
            let cell = &mut tables[slot][idx];
            if cell.is_some() {
                return Err(err(ln, "duplicate table entry".into()));
            }
            *cell = Some(prob);
        }
        let k = cards.ok_or_else(|| CstpError::parse(origin, "missing `cards` line"))?;
        let [s, x, y] = tables.map(|t| t.into_iter().collect::<Option<Vec<f64>>>());
        match (s, x, y) {
            (Some(p_s), Some(p_x), Some(p_y)) => {
                DiscreteScm::new(k, p_s, p_x, p_y).map_err(|e| CstpError::parse(origin, e.to_string()))
            }
            _ => Err(CstpError::parse(origin, "conditional tables are incomplete")),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CstpError::io(path, e))?;
        DiscreteScm::parse(&text, path)
    }

    /// Serialises in the text format accepted by [`DiscreteScm::parse`].
    pub fn to_text(&self) -> String {
        let k = self.cards;
        let mut out = format!("cards {} {} {} {} {}\n", k.s, k.e, k.c, k.x, k.y);
        for e in 0..k.e {
            for c in 0..k.c {
                for s in 0..k.s {
                    let _ = writeln!(out, "S {s} {e} {c} {}", self.p_s(s, e, c));
                }
            }
        }
        for s in 0..k.s {
            for e in 0..k.e {
                for c in 0..k.c {
                    for x in 0..k.x {
                        let _ = writeln!(out, "X {x} {s} {e} {c} {}", self.p_x(x, s, e, c));
                    }
                }
            }
        }
        for x in 0..k.x {
            for s in 0..k.s {
                for e in 0..k.e {
                    for c in 0..k.c {
                        for y in 0..k.y {
                            let _ = writeln!(out, "Y {y} {x} {s} {e} {c} {}", self.p_y(y, x, s, e, c));
                        }
                    }
                }
            }
        }
        out
    }
}
