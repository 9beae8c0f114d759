//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] borrows a [`ParamStore`]; parameters are pulled into the
//! graph by name with [`Graph::param`], every operation records a backward
//! closure, and [`Graph::backward`] returns gradients for exactly the
//! parameters that reach the loss. A graph built with `grad_enabled = false`
//! records nothing, so intermediate values are freed as soon as the last
//! [`Var`] referencing them is dropped.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{CstpError, Result};
use crate::kernels;
use crate::tensor::{numel, Tensor};

/// Named parameters with deterministic (sorted) iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(CstpError::invalid(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Replaces the value of an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| CstpError::invalid(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(CstpError::shape(format!(
                "parameter `{name}` has shape {:?}, refusing {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Gradients keyed by parameter name.
pub type GradResult = BTreeMap<String, Tensor>;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    param: Option<String>,
}

/// A value in a [`Graph`]. Cloning is cheap.
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    id: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id={:?}, {:?})", self.id, self.value)
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    grad_enabled: bool,
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<String, Var>>,
}

/// How the smaller operand of a binary op maps onto the larger one.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// `b` repeats with period `b.len()` over `a` (trailing-suffix or scalar).
    RightCycles,
    /// `a` repeats over `b`.
    LeftCycles,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_mode(a: &Tensor, b: &Tensor, what: &str) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.numel() == 1 || is_suffix(b.shape(), a.shape()) {
        Ok(Broadcast::RightCycles)
    } else if a.numel() == 1 || is_suffix(a.shape(), b.shape()) {
        Ok(Broadcast::LeftCycles)
    } else {
        Err(CstpError::shape(format!(
            "{what}: cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

/// Sums `grad` down to a tensor of `shape` whose values repeat with period
/// `numel(shape)` along the flattened gradient.
fn reduce_cyclic(grad: &Tensor, shape: &[usize]) -> Tensor {
    let len = numel(shape);
    let mut out = vec![0.0; len];
    for chunk in grad.data().chunks(len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Splits a shape around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, grad_enabled: bool) -> Self {
        Graph {
            store,
            grad_enabled,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    /// Inference-only graph: nothing is recorded.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph::new(store, false)
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn tape_len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            value: Rc::new(value),
            id: None,
        }
    }

    /// Binds a parameter from the store. Repeated calls return the same leaf.
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| CstpError::invalid(format!("unknown parameter `{name}`")))?;
        let id = if self.grad_enabled {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                backward: None,
                param: Some(name.to_string()),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        let var = Var {
            value: Rc::new(value.clone()),
            id,
        };
        self.bound.borrow_mut().insert(name.to_string(), var.clone());
        Ok(var)
    }

    fn tracks(&self, inputs: &[&Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| v.id.is_some())
    }

    fn record<F>(&self, value: Tensor, inputs: &[&Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        self.record_shared(Rc::new(value), inputs, backward)
    }

    fn record_shared<F>(&self, value: Rc<Tensor>, inputs: &[&Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        if !self.tracks(inputs) {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: Some(Box::new(backward)),
            param: None,
        });
        Var {
            value,
            id: Some(nodes.len() - 1),
        }
    }

    /// Gradients of a one-element `loss` with respect to every reachable
    /// parameter.
    pub fn backward(&self, loss: &Var) -> Result<GradResult> {
        if loss.value.numel() != 1 {
            return Err(CstpError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut result = GradResult::new();
        let Some(root) = loss.id else {
            return Ok(result);
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(loss.shape().to_vec()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(name) = &node.param {
                result.insert(name.clone(), g);
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &needs);
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (parent, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(result)
    }

    // ----- elementwise -------------------------------------------------

    fn binary(
        &self,
        a: &Var,
        b: &Var,
        what: &str,
        f: fn(f64, f64) -> f64,
        // (da, db) given (a, b)
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<Var> {
        let mode = broadcast_mode(a.value(), b.value(), what)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        let (out_shape, n) = match mode {
            Broadcast::LeftCycles => (bv.shape().to_vec(), bv.numel()),
            _ => (av.shape().to_vec(), av.numel()),
        };
        let (la, lb) = (av.numel(), bv.numel());
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = match mode {
            Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::RightCycles => (0..n).map(|i| f(ad[i], bd[i % lb])).collect(),
            Broadcast::LeftCycles => (0..n).map(|i| f(ad[i % la], bd[i])).collect(),
        };
        let out = Tensor::from_parts(out_shape.clone(), data);
        Ok(self.record(out, &[a, b], move |g, needs| {
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            let mut ga = needs[0].then(|| vec![0.0; n]);
            let mut gb = needs[1].then(|| vec![0.0; n]);
            for i in 0..n {
                let (x, y) = match mode {
                    Broadcast::Same => (ad[i], bd[i]),
                    Broadcast::RightCycles => (ad[i], bd[i % lb]),
                    Broadcast::LeftCycles => (ad[i % la], bd[i]),
                };
                let (dx, dy) = df(x, y);
                if let Some(ga) = ga.as_mut() {
                    ga[i] = dx * gd[i];
                }
                if let Some(gb) = gb.as_mut() {
                    gb[i] = dy * gd[i];
                }
            }
            let full = |v: Vec<f64>| Tensor::from_parts(out_shape.clone(), v);
            let ga = ga.map(|v| {
                let t = full(v);
                if t.numel() == la && matches!(mode, Broadcast::Same | Broadcast::RightCycles) {
                    t.reshaped(av.shape().to_vec())
                } else {
                    reduce_cyclic(&t, av.shape())
                }
            });
            let gb = gb.map(|v| {
                let t = full(v);
                if t.numel() == lb && matches!(mode, Broadcast::Same | Broadcast::LeftCycles) {
                    t.reshaped(bv.shape().to_vec())
                } else {
                    reduce_cyclic(&t, bv.shape())
                }
            });
            vec![ga, gb]
        }))
    }

    /// Elementwise sum. The smaller operand may be a scalar or a trailing
    /// suffix of the larger operand's shape.
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |x, y| (y, x))
    }

    fn unary(&self, a: &Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let out = Rc::new(a.value.map(f));
        if !self.tracks(&[a]) {
            return Var { value: out, id: None };
        }
        let av = a.value.clone();
        let ov = out.clone();
        self.record_shared(out, &[a], move |g, _| {
            let data = av
                .data()
                .iter()
                .zip(ov.data())
                .zip(g.data())
                .map(|((&x, &y), &gi)| df(x, y) * gi)
                .collect();
            vec![Some(Tensor::from_parts(av.shape().to_vec(), data))]
        })
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        let out = a.value.scale(c);
        self.record(out, &[a], move |g, _| vec![Some(g.scale(c))])
    }

    pub fn add_scalar(&self, a: &Var, c: f64) -> Var {
        let out = a.value.map(|x| x + c);
        self.record(out, &[a], |g, _| vec![Some(g.clone())])
    }

    pub fn relu(&self, a: &Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self, a: &Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        self.unary(a, kernels::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self, a: &Var) -> Var {
        self.unary(a, kernels::silu, |x, _| kernels::silu_grad(x))
    }

    pub fn softplus(&self, a: &Var) -> Var {
        self.unary(a, kernels::softplus, |x, _| kernels::sigmoid(x))
    }

    pub fn exp(&self, a: &Var) -> Var {
        self.unary(a, kernels::exp, |_, y| y)
    }

    pub fn square(&self, a: &Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// `sqrt(x + eps)`; `eps` keeps the derivative finite at zero.
    pub fn sqrt_eps(&self, a: &Var, eps: f64) -> Var {
        self.unary(a, move |x| (x + eps).sqrt(), |_, y| 0.5 / y)
    }

    // ----- reductions and shape plumbing ---------------------------------

    pub fn sum(&self, a: &Var) -> Var {
        let out = Tensor::scalar(a.value.sum());
        let shape = a.shape().to_vec();
        self.record(out, &[a], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
        })
    }

    pub fn mean(&self, a: &Var) -> Var {
        let n = a.value.numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(&s, 1.0 / n)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(CstpError::shape(format!("mse: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let d = self.sub(a, b)?;
        Ok(self.mean(&self.square(&d)))
    }

    /// Sums over one axis, removing it.
    pub fn sum_axis(&self, a: &Var, axis: usize) -> Result<Var> {
        let shape = a.shape().to_vec();
        if axis >= shape.len() {
            return Err(CstpError::shape(format!("sum_axis: axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        let ad = a.value.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &ad[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::from_parts(out_shape, out);
        Ok(self.record(out, &[a], move |g, _| {
            let gd = g.data();
            let mut ga = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    ga[(o * len + l) * inner..(o * len + l + 1) * inner]
                        .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), ga))]
        }))
    }

    pub fn mean_axis(&self, a: &Var, axis: usize) -> Result<Var> {
        let len = *a
            .shape()
            .get(axis)
            .ok_or_else(|| CstpError::shape(format!("mean_axis: axis {axis} for {:?}", a.shape())))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(&s, 1.0 / len.max(1) as f64))
    }

    pub fn reshape(&self, a: &Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = a.value.reshape(shape)?;
        let in_shape = a.shape().to_vec();
        Ok(self.record(out, &[a], move |g, _| {
            vec![Some(g.clone().reshaped(in_shape.clone()))]
        }))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&self, parts: &[&Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CstpError::invalid("concat of zero tensors"))?;
        let lead = &first.shape()[..first.shape().len().saturating_sub(1)];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(CstpError::shape(format!(
                    "concat_last: {:?} vs {:?}",
                    first.shape(),
                    s
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows = numel(lead);
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&p.value.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::from_parts(shape, out);
        let lead = lead.to_vec();
        Ok(self.record(out, parts, move |g, needs| {
            let gd = g.data();
            let mut off = 0;
            let mut res = Vec::with_capacity(widths.len());
            for (&w, &need) in widths.iter().zip(needs) {
                if need {
                    let mut v = vec![0.0; rows * w];
                    for r in 0..rows {
                        v[r * w..(r + 1) * w]
                            .copy_from_slice(&gd[r * total + off..r * total + off + w]);
                    }
                    let mut s = lead.clone();
                    s.push(w);
                    res.push(Some(Tensor::from_parts(s, v)));
                } else {
                    res.push(None);
                }
                off += w;
            }
            res
        }))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let shape = a.shape().to_vec();
        let w = *shape.last().ok_or_else(|| CstpError::shape("slice_last of a scalar"))?;
        if start + len > w {
            return Err(CstpError::shape(format!(
                "slice_last: {start}+{len} exceeds width {w}"
            )));
        }
        let rows = a.value.numel() / w.max(1);
        let ad = a.value.data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&ad[r * w + start..r * w + start + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let out = Tensor::from_parts(out_shape, out);
        Ok(self.record(out, &[a], move |g, _| {
            let mut ga = vec![0.0; rows * w];
            for r in 0..rows {
                ga[r * w + start..r * w + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), ga))]
        }))
    }

    /// Repeats a unit-extent axis `n` times.
    pub fn repeat_axis(&self, a: &Var, axis: usize, n: usize) -> Result<Var> {
        let shape = a.shape().to_vec();
        if shape.get(axis) != Some(&1) {
            return Err(CstpError::shape(format!(
                "repeat_axis: axis {axis} of {shape:?} must have extent 1"
            )));
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let ad = a.value.data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&ad[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = n;
        let out = Tensor::from_parts(out_shape, out);
        Ok(self.record(out, &[a], move |g, _| {
            let gd = g.data();
            let mut ga = vec![0.0; outer * inner];
            for o in 0..outer {
                for r in 0..n {
                    let src = &gd[(o * n + r) * inner..(o * n + r + 1) * inner];
                    for (d, s) in ga[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), ga))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: &Var, perm: &[usize]) -> Result<Var> {
        let shape = a.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(CstpError::shape(format!("permute: {perm:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = Tensor::from_parts(out_shape.clone(), permute_data(a.value.data(), &shape, perm));
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.record(out, &[a], move |g, _| {
            vec![Some(Tensor::from_parts(
                shape.clone(),
                permute_data(g.data(), &out_shape, &inverse),
            ))]
        }))
    }

    /// `out[index[k], :] += x[k, :]` into a `rows × c` result.
    pub fn scatter_rows(&self, x: &Var, index: &[usize], rows: usize) -> Result<Var> {
        let s = x.shape();
        if s.len() != 2 || s[0] != index.len() {
            return Err(CstpError::shape(format!(
                "scatter_rows: x {:?} with {} indices",
                s,
                index.len()
            )));
        }
        let c = s[1];
        if let Some(&bad) = index.iter().find(|&&r| r >= rows) {
            return Err(CstpError::shape(format!("scatter_rows: row {bad} >= {rows}")));
        }
        let xd = x.value.data();
        let mut out = vec![0.0; rows * c];
        for (k, &r) in index.iter().enumerate() {
            for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(&xd[k * c..(k + 1) * c]) {
                *o += v;
            }
        }
        let out = Tensor::from_parts(vec![rows, c], out);
        let index = index.to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            let gd = g.data();
            let mut gx = Vec::with_capacity(index.len() * c);
            for &r in &index {
                gx.extend_from_slice(&gd[r * c..(r + 1) * c]);
            }
            vec![Some(Tensor::from_parts(vec![index.len(), c], gx))]
        }))
    }

    // ----- linear algebra -------------------------------------------------

    /// `a: [..., m, k] · b` where `b` is `[k, n]` (shared across the batch) or
    /// `[..., k, n]` with the same leading extents as `a`.
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(CstpError::shape(format!("matmul needs matrices: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if k != k2 || (!shared_b && sb[..sb.len() - 2] != *batch_a) {
            return Err(CstpError::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let batch = numel(batch_a);
        let (ad, bd) = (a.value.data(), b.value.data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let bb = if shared_b { bd } else { &bd[i * k * n..(i + 1) * k * n] };
            kernels::gemm_acc(
                &ad[i * m * k..(i + 1) * m * k],
                bb,
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let out = Tensor::from_parts(out_shape, out);
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; batch * m * k];
                for i in 0..batch {
                    let bb = if shared_b { bd } else { &bd[i * k * n..(i + 1) * k * n] };
                    kernels::gemm_nt_acc(
                        &gd[i * m * n..(i + 1) * m * n],
                        bb,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                Tensor::from_parts(av.shape().to_vec(), ga)
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; bv.numel()];
                for i in 0..batch {
                    let off = if shared_b { 0 } else { i * k * n };
                    kernels::gemm_tn_acc(
                        &ad[i * m * k..(i + 1) * m * k],
                        &gd[i * m * n..(i + 1) * m * n],
                        &mut gb[off..off + k * n],
                        k,
                        m,
                        n,
                    );
                }
                Tensor::from_parts(bv.shape().to_vec(), gb)
            });
            vec![ga, gb]
        }))
    }

    /// Affine map over the last axis: `x · w (+ b)` with `w: [d_in, d_out]`.
    pub fn linear(&self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let (sx, sw) = (x.shape().to_vec(), w.shape().to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(CstpError::shape(format!("linear: input {sx:?} with weight {sw:?}")));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if b.shape() != [dout] {
                return Err(CstpError::shape(format!(
                    "linear: bias {:?} for output width {dout}",
                    b.shape()
                )));
            }
        }
        let rows = x.value.numel() / din.max(1);
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(b.value.data());
            }
        }
        kernels::gemm_acc(x.value.data(), w.value.data(), &mut out, rows, din, dout);
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = dout;
        let out = Tensor::from_parts(out_shape, out);
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        Ok(self.record(out, &inputs, move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; rows * din];
                kernels::gemm_nt_acc(gd, wv.data(), &mut gx, rows, dout, din);
                Tensor::from_parts(xv.shape().to_vec(), gx)
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; din * dout];
                kernels::gemm_tn_acc(xv.data(), gd, &mut gw, din, rows, dout);
                Tensor::from_parts(vec![din, dout], gw)
            });
            let mut res = vec![gx, gw];
            if needs.len() > 2 {
                res.push(needs[2].then(|| reduce_cyclic(g, &[dout])));
            }
            res
        }))
    }

    /// Applies a constant matrix `m: [r, l]` along `axis` (extent `l`):
    /// `out[.., i, ..] = Σ_j m[i, j] · x[.., j, ..]`.
    pub fn mix_axis(&self, x: &Var, axis: usize, m: &Tensor) -> Result<Var> {
        let shape = x.shape().to_vec();
        if axis >= shape.len() || m.rank() != 2 || m.shape()[1] != shape[axis] {
            return Err(CstpError::shape(format!(
                "mix_axis: matrix {:?} along axis {axis} of {shape:?}",
                m.shape()
            )));
        }
        let (outer, l, inner) = split_axis(&shape, axis);
        let r = m.shape()[0];
        let xd = x.value.data();
        let mut out = vec![0.0; outer * r * inner];
        for o in 0..outer {
            kernels::gemm_acc(
                m.data(),
                &xd[o * l * inner..(o + 1) * l * inner],
                &mut out[o * r * inner..(o + 1) * r * inner],
                r,
                l,
                inner,
            );
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = r;
        let out = Tensor::from_parts(out_shape, out);
        let m = m.clone();
        Ok(self.record(out, &[x], move |g, _| {
            let gd = g.data();
            let mut gx = vec![0.0; outer * l * inner];
            for o in 0..outer {
                kernels::gemm_tn_acc(
                    m.data(),
                    &gd[o * r * inner..(o + 1) * r * inner],
                    &mut gx[o * l * inner..(o + 1) * l * inner],
                    l,
                    r,
                    inner,
                );
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }))
    }

    // ----- normalisation ----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: &Var) -> Var {
        let out_rc = Rc::new(crate::ops::softmax_rows(a.value()));
        let w = a.value.last_dim();
        let out = out_rc.clone();
        self.record_shared(out, &[a], move |g, _| {
            let p = out_rc.data();
            let mut ga = vec![0.0; p.len()];
            for ((pr, gr), o) in p.chunks(w).zip(g.data().chunks(w)).zip(ga.chunks_mut(w)) {
                kernels::softmax_backward_row(pr, gr, o);
            }
            vec![Some(Tensor::from_parts(out_rc.shape().to_vec(), ga))]
        })
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let w = x.value.last_dim();
        if gain.shape() != [w] || bias.shape() != [w] {
            return Err(CstpError::shape(format!(
                "layer_norm: width {w} with gain {:?} bias {:?}",
                gain.shape(),
                bias.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(CstpError::invalid("layer_norm eps must be positive"));
        }
        let rows = x.value.numel() / w.max(1);
        let xd = x.value.data();
        let mut xhat = vec![0.0; rows * w];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * w..(r + 1) * w];
            let mu = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, v) in xhat[r * w..(r + 1) * w].iter_mut().zip(row) {
                *h = (v - mu) * is;
            }
        }
        let (gd, bd) = (gain.value.data(), bias.value.data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * gd[i % w] + bd[i % w])
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let gv = gain.value.clone();
        let shape = x.shape().to_vec();
        Ok(self.record(out, &[x, gain, bias], move |g, needs| {
            let gdat = g.data();
            let gain = gv.data();
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; rows * w];
                for r in 0..rows {
                    let h = &xhat[r * w..(r + 1) * w];
                    let gr = &gdat[r * w..(r + 1) * w];
                    let gh: Vec<f64> = gr.iter().zip(gain).map(|(a, b)| a * b).collect();
                    let mean_gh = gh.iter().sum::<f64>() / w as f64;
                    let mean_ghh = gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for j in 0..w {
                        gx[r * w + j] = inv_std[r] * (gh[j] - mean_gh - h[j] * mean_ghh);
                    }
                }
                Tensor::from_parts(shape.clone(), gx)
            });
            let ggain = needs[1].then(|| {
                let mut v = vec![0.0; w];
                for (i, (gi, hi)) in gdat.iter().zip(&xhat).enumerate() {
                    v[i % w] += gi * hi;
                }
                Tensor::from_parts(vec![w], v)
            });
            let gbias = needs[2].then(|| reduce_cyclic(g, &[w]));
            vec![gx, ggain, gbias]
        }))
    }

    // ----- convolutions -----------------------------------------------------

    /// Depthwise causal convolution along axis 1 of `x: [B, T, N, C]` with
    /// `kernel: [k, C]` and optional bias `[C]`. Output time `t` reads inputs
    /// `t-k+1 ..= t`, zero-padded on the left.
    pub fn conv_time_depthwise(&self, x: &Var, kernel: &Var, bias: Option<&Var>) -> Result<Var> {
        let s = x.shape().to_vec();
        let ks = kernel.shape().to_vec();
        if s.len() != 4 || ks.len() != 2 || ks[1] != s[3] {
            return Err(CstpError::shape(format!(
                "depthwise conv: input {s:?} with kernel {ks:?}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [s[3]] {
                return Err(CstpError::shape(format!("depthwise conv bias {:?}", b.shape())));
            }
        }
        let (bsz, t_len, n, c) = (s[0], s[1], s[2], s[3]);
        let k = ks[0];
        let xd = x.value.data();
        let kd = kernel.value.data();
        let idx = move |b: usize, t: usize, nn: usize| ((b * t_len + t) * n + nn) * c;
        let mut out = vec![0.0; xd.len()];
        for b in 0..bsz {
            for t in 0..t_len {
                for nn in 0..n {
                    let o = idx(b, t, nn);
                    if let Some(bias) = bias {
                        out[o..o + c].copy_from_slice(bias.value.data());
                    }
                    for j in 0..k {
                        // input time = t - (k-1) + j
                        let Some(src_t) = (t + j).checked_sub(k - 1) else {
                            continue;
                        };
                        let i = idx(b, src_t, nn);
                        let krow = &kd[j * c..(j + 1) * c];
                        for ch in 0..c {
                            out[o + ch] += krow[ch] * xd[i + ch];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(s.clone(), out);
        let (xv, kv) = (x.value.clone(), kernel.value.clone());
        let mut inputs = vec![x, kernel];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.record(out, &inputs, move |g, needs| {
            let (xd, kd, gd) = (xv.data(), kv.data(), g.data());
            let mut gx = needs[0].then(|| vec![0.0; xd.len()]);
            let mut gk = needs[1].then(|| vec![0.0; k * c]);
            for b in 0..bsz {
                for t in 0..t_len {
                    for nn in 0..n {
                        let o = idx(b, t, nn);
                        for j in 0..k {
                            let Some(src_t) = (t + j).checked_sub(k - 1) else {
                                continue;
                            };
                            let i = idx(b, src_t, nn);
                            for ch in 0..c {
                                let gv = gd[o + ch];
                                if let Some(gx) = gx.as_mut() {
                                    gx[i + ch] += kd[j * c + ch] * gv;
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[j * c + ch] += xd[i + ch] * gv;
                                }
                            }
                        }
                    }
                }
            }
            let mut res = vec![
                gx.map(|v| Tensor::from_parts(xv.shape().to_vec(), v)),
                gk.map(|v| Tensor::from_parts(vec![k, c], v)),
            ];
            if needs.len() > 2 {
                res.push(needs[2].then(|| reduce_cyclic(g, &[c])));
            }
            res
        }))
    }

    /// 2-D convolution on channels-last images `x: [K, H, W, Cin]` with
    /// `w: [kh, kw, Cin, Cout]`, bias `[Cout]`, symmetric zero padding.
    pub fn conv2d(&self, x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        let s = x.shape().to_vec();
        let ws = w.shape().to_vec();
        if s.len() != 4 || ws.len() != 4 || ws[2] != s[3] || b.shape() != [ws[3]] || stride == 0 {
            return Err(CstpError::shape(format!(
                "conv2d: input {s:?}, weight {ws:?}, bias {:?}, stride {stride}",
                b.shape()
            )));
        }
        let (kn, h, wd, cin) = (s[0], s[1], s[2], s[3]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(CstpError::shape(format!("conv2d: image {h}x{wd} smaller than kernel")));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let xd = x.value.data();
        let wdat = w.value.data();
        let mut out = vec![0.0; kn * ho * wo * cout];
        // Visits (output cell, kernel tap, input cell) triples.
        let taps = move |f: &mut dyn FnMut(usize, usize, usize)| {
            for img in 0..kn {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let o = ((img * ho + oy) * wo + ox) * cout;
                        for dy in 0..kh {
                            let iy = (oy * stride + dy) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let i = ((img * h + iy as usize) * wd + ix as usize) * cin;
                                let wo_ = (dy * kw + dx) * cin * cout;
                                f(o, wo_, i);
                            }
                        }
                    }
                }
            }
        };
        for chunk in out.chunks_mut(cout) {
            chunk.copy_from_slice(b.value.data());
        }
        taps(&mut |o, wo_, i| {
            for ci in 0..cin {
                let xv = xd[i + ci];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wdat[wo_ + ci * cout..wo_ + (ci + 1) * cout];
                for (oc, wv) in out[o..o + cout].iter_mut().zip(wrow) {
                    *oc += xv * wv;
                }
            }
        });
        let out = Tensor::from_parts(vec![kn, ho, wo, cout], out);
        let (xv, wv) = (x.value.clone(), w.value.clone());
        Ok(self.record(out, &[x, w, b], move |g, needs| {
            let (xd, wdat, gd) = (xv.data(), wv.data(), g.data());
            let mut gx = needs[0].then(|| vec![0.0; xd.len()]);
            let mut gw = needs[1].then(|| vec![0.0; wdat.len()]);
            taps(&mut |o, wo_, i| {
                let go = &gd[o..o + cout];
                for ci in 0..cin {
                    let wrow = &wdat[wo_ + ci * cout..wo_ + (ci + 1) * cout];
                    if let Some(gx) = gx.as_mut() {
                        gx[i + ci] += wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xv = xd[i + ci];
                        for (gwv, gov) in gw[wo_ + ci * cout..wo_ + (ci + 1) * cout].iter_mut().zip(go) {
                            *gwv += xv * gov;
                        }
                    }
                }
            });
            vec![
                gx.map(|v| Tensor::from_parts(xv.shape().to_vec(), v)),
                gw.map(|v| Tensor::from_parts(wv.shape().to_vec(), v)),
                needs[2].then(|| reduce_cyclic(g, &[cout])),
            ]
        }))
    }

    // ----- fused sequence operators -------------------------------------------

    /// Multi-head scaled dot-product attention along axis 1.
    ///
    /// `q: [O, Lq, M, W]`, `k: [O, Lk, M, W]`, `v: [O, Lk, M, Wv]`. For each
    /// `(o, m)` pair and head `h`, queries `q[o, :, m, h-slice]` attend over
    /// keys `k[o, :, m, h-slice]`. Heads split `W` and `Wv` evenly.
    pub fn attend(&self, q: &Var, k: &Var, v: &Var, heads: usize) -> Result<Var> {
        let geom = AttnGeom::new(q.shape(), k.shape(), v.shape(), heads)?;
        let out = attention_forward(&geom, q.value(), k.value(), v.value());
        let (qv, kv, vv) = (q.value.clone(), k.value.clone(), v.value.clone());
        Ok(self.record(out, &[q, k, v], move |g, needs| {
            let (gq, gk, gv) = attention_backward(&geom, &qv, &kv, &vv, g, needs);
            vec![gq, gk, gv]
        }))
    }

    /// Diagonal selective state-space scan along axis 1.
    ///
    /// Shapes: `u, delta: [B, T, N, C]`, `b, c: [B, T, N, S]`, `a: [C, S]`,
    /// `d: [C]`. Per `(b, n)` sequence and channel `ch`, with zero initial
    /// state:
    ///
    /// `h_t = exp(Δ_t·a) ⊙ h_{t-1} + Δ_t·B_t·u_t`,
    /// `y_t = ⟨C_t, h_t⟩ + d·u_t`.
    pub fn selective_scan(
        &self,
        u: &Var,
        delta: &Var,
        b: &Var,
        c: &Var,
        a: &Var,
        d: &Var,
    ) -> Result<Var> {
        let geom = ScanGeom::new(u.shape(), delta.shape(), b.shape(), c.shape(), a.shape(), d.shape())?;
        let keep_states = self.tracks(&[u, delta, b, c, a, d]);
        let (y, states) = scan_forward(
            &geom,
            u.value(),
            delta.value(),
            b.value(),
            c.value(),
            a.value(),
            d.value(),
            keep_states,
        );
        let vals = [
            u.value.clone(),
            delta.value.clone(),
            b.value.clone(),
            c.value.clone(),
            a.value.clone(),
            d.value.clone(),
        ];
        Ok(self.record(y, &[u, delta, b, c, a, d], move |g, _| {
            scan_backward(&geom, &vals, &states, g)
        }))
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

// ----- attention internals ------------------------------------------------------

#[derive(Clone, Copy)]
struct AttnGeom {
    outer: usize,
    lq: usize,
    lk: usize,
    mid: usize,
    w: usize,
    wv: usize,
    heads: usize,
}

impl AttnGeom {
    fn new(q: &[usize], k: &[usize], v: &[usize], heads: usize) -> Result<Self> {
        if q.len() != 4 || k.len() != 4 || v.len() != 4 {
            return Err(CstpError::shape(format!("attend needs rank-4 inputs: {q:?} {k:?} {v:?}")));
        }
        if q[0] != k[0] || q[2] != k[2] || q[3] != k[3] || v[0] != k[0] || v[1] != k[1] || v[2] != k[2] {
            return Err(CstpError::shape(format!("attend: q {q:?}, k {k:?}, v {v:?}")));
        }
        if heads == 0 || !q[3].is_multiple_of(heads) || !v[3].is_multiple_of(heads) {
            return Err(CstpError::invalid(format!(
                "attend: {heads} heads do not divide widths {} and {}",
                q[3], v[3]
            )));
        }
        Ok(AttnGeom {
            outer: q[0],
            lq: q[1],
            lk: k[1],
            mid: q[2],
            w: q[3],
            wv: v[3],
            heads,
        })
    }

    fn dk(&self) -> usize {
        self.w / self.heads
    }

    fn dv(&self) -> usize {
        self.wv / self.heads
    }

    /// Copies the `(o, m, head)` slice of a `[O, L, M, width]` tensor into a
    /// dense `L × hw` block.
    fn gather(data: &[f64], o: usize, m: usize, h: usize, l: usize, mid: usize, width: usize, hw: usize, out: &mut [f64]) {
        for i in 0..l {
            let src = ((o * l + i) * mid + m) * width + h * hw;
            out[i * hw..(i + 1) * hw].copy_from_slice(&data[src..src + hw]);
        }
    }

    fn scatter_add(data: &mut [f64], o: usize, m: usize, h: usize, l: usize, mid: usize, width: usize, hw: usize, block: &[f64]) {
        for i in 0..l {
            let dst = ((o * l + i) * mid + m) * width + h * hw;
            for (d, s) in data[dst..dst + hw].iter_mut().zip(&block[i * hw..(i + 1) * hw]) {
                *d += s;
            }
        }
    }
}

/// Attention probabilities for one `(o, m, h)` group, `lq × lk`.
fn attention_probs_block(geom: &AttnGeom, qb: &[f64], kb: &[f64], kt: &mut [f64], scores: &mut [f64]) {
    let dk = geom.dk();
    kernels::transpose(kb, geom.lk, dk, kt);
    scores.iter_mut().for_each(|s| *s = 0.0);
    kernels::gemm_acc(qb, kt, scores, geom.lq, dk, geom.lk);
    let scale = 1.0 / (dk as f64).sqrt();
    for row in scores.chunks_mut(geom.lk) {
        for s in row.iter_mut() {
            *s *= scale;
        }
        kernels::softmax_in_place(row);
    }
}

fn attention_forward(geom: &AttnGeom, q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (dk, dv) = (geom.dk(), geom.dv());
    let mut out = vec![0.0; geom.outer * geom.lq * geom.mid * geom.wv];
    let mut qb = vec![0.0; geom.lq * dk];
    let mut kb = vec![0.0; geom.lk * dk];
    let mut kt = vec![0.0; geom.lk * dk];
    let mut vb = vec![0.0; geom.lk * dv];
    let mut p = vec![0.0; geom.lq * geom.lk];
    let mut ob = vec![0.0; geom.lq * dv];
    for o in 0..geom.outer {
        for m in 0..geom.mid {
            for h in 0..geom.heads {
                AttnGeom::gather(q.data(), o, m, h, geom.lq, geom.mid, geom.w, dk, &mut qb);
                AttnGeom::gather(k.data(), o, m, h, geom.lk, geom.mid, geom.w, dk, &mut kb);
                AttnGeom::gather(v.data(), o, m, h, geom.lk, geom.mid, geom.wv, dv, &mut vb);
                attention_probs_block(geom, &qb, &kb, &mut kt, &mut p);
                ob.iter_mut().for_each(|x| *x = 0.0);
                kernels::gemm_acc(&p, &vb, &mut ob, geom.lq, geom.lk, dv);
                AttnGeom::scatter_add(&mut out, o, m, h, geom.lq, geom.mid, geom.wv, dv, &ob);
            }
        }
    }
    Tensor::from_parts(vec![geom.outer, geom.lq, geom.mid, geom.wv], out)
}

/// Attention probabilities `[O, M, H, Lq, Lk]` for inspection and tests.
pub fn attention_probabilities(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let s = k.shape();
    let geom = AttnGeom::new(q.shape(), k.shape(), &[s[0], s[1], s[2], heads], heads)?;
    let dk = geom.dk();
    let mut qb = vec![0.0; geom.lq * dk];
    let mut kb = vec![0.0; geom.lk * dk];
    let mut kt = vec![0.0; geom.lk * dk];
    let mut p = vec![0.0; geom.lq * geom.lk];
    let mut out = Vec::with_capacity(geom.outer * geom.mid * heads * geom.lq * geom.lk);
    for o in 0..geom.outer {
        for m in 0..geom.mid {
            for h in 0..heads {
                AttnGeom::gather(q.data(), o, m, h, geom.lq, geom.mid, geom.w, dk, &mut qb);
                AttnGeom::gather(k.data(), o, m, h, geom.lk, geom.mid, geom.w, dk, &mut kb);
                attention_probs_block(&geom, &qb, &kb, &mut kt, &mut p);
                out.extend_from_slice(&p);
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![geom.outer, geom.mid, heads, geom.lq, geom.lk],
        out,
    ))
}

fn attention_backward(
    geom: &AttnGeom,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (dk, dv, lq, lk) = (geom.dk(), geom.dv(), geom.lq, geom.lk);
    let mut gq = vec![0.0; q.numel()];
    let mut gk = vec![0.0; k.numel()];
    let mut gv = vec![0.0; v.numel()];
    let mut qb = vec![0.0; lq * dk];
    let mut kb = vec![0.0; lk * dk];
    let mut kt = vec![0.0; lk * dk];
    let mut vb = vec![0.0; lk * dv];
    let mut gb = vec![0.0; lq * dv];
    let mut p = vec![0.0; lq * lk];
    let mut dp = vec![0.0; lq * lk];
    let mut ds = vec![0.0; lq * lk];
    let mut blk_q = vec![0.0; lq * dk];
    let mut blk_k = vec![0.0; lk * dk];
    let mut blk_v = vec![0.0; lk * dv];
    let scale = 1.0 / (dk as f64).sqrt();
    for o in 0..geom.outer {
        for m in 0..geom.mid {
            for h in 0..geom.heads {
                AttnGeom::gather(q.data(), o, m, h, lq, geom.mid, geom.w, dk, &mut qb);
                AttnGeom::gather(k.data(), o, m, h, lk, geom.mid, geom.w, dk, &mut kb);
                AttnGeom::gather(v.data(), o, m, h, lk, geom.mid, geom.wv, dv, &mut vb);
                AttnGeom::gather(g.data(), o, m, h, lq, geom.mid, geom.wv, dv, &mut gb);
                attention_probs_block(geom, &qb, &kb, &mut kt, &mut p);
                if needs[2] {
                    blk_v.iter_mut().for_each(|x| *x = 0.0);
                    kernels::gemm_tn_acc(&p, &gb, &mut blk_v, lk, lq, dv);
                    AttnGeom::scatter_add(&mut gv, o, m, h, lk, geom.mid, geom.wv, dv, &blk_v);
                }
                if !(needs[0] || needs[1]) {
                    continue;
                }
                dp.iter_mut().for_each(|x| *x = 0.0);
                kernels::gemm_nt_acc(&gb, &vb, &mut dp, lq, dv, lk);
                for ((pr, gr), dr) in p.chunks(lk).zip(dp.chunks(lk)).zip(ds.chunks_mut(lk)) {
                    kernels::softmax_backward_row(pr, gr, dr);
                    for x in dr.iter_mut() {
                        *x *= scale;
                    }
                }
                if needs[0] {
                    blk_q.iter_mut().for_each(|x| *x = 0.0);
                    kernels::gemm_acc(&ds, &kb, &mut blk_q, lq, lk, dk);
                    AttnGeom::scatter_add(&mut gq, o, m, h, lq, geom.mid, geom.w, dk, &blk_q);
                }
                if needs[1] {
                    blk_k.iter_mut().for_each(|x| *x = 0.0);
                    kernels::gemm_tn_acc(&ds, &qb, &mut blk_k, lk, lq, dk);
                    AttnGeom::scatter_add(&mut gk, o, m, h, lk, geom.mid, geom.w, dk, &blk_k);
                }
            }
        }
    }
    (
        needs[0].then(|| Tensor::from_parts(q.shape().to_vec(), gq)),
        needs[1].then(|| Tensor::from_parts(k.shape().to_vec(), gk)),
        needs[2].then(|| Tensor::from_parts(v.shape().to_vec(), gv)),
    )
}

// ----- selective scan internals ---------------------------------------------------

#[derive(Clone, Copy)]
struct ScanGeom {
    batch: usize,
    t_len: usize,
    nodes: usize,
    ch: usize,
    state: usize,
}

impl ScanGeom {
    fn new(u: &[usize], delta: &[usize], b: &[usize], c: &[usize], a: &[usize], d: &[usize]) -> Result<Self> {
        let bad = || {
            CstpError::shape(format!(
                "selective_scan: u {u:?}, delta {delta:?}, B {b:?}, C {c:?}, A {a:?}, D {d:?}"
            ))
        };
        if u.len() != 4 || delta != u || b.len() != 4 || c != b || b[..3] != u[..3] {
            return Err(bad());
        }
        if a != [u[3], b[3]] || d != [u[3]] {
            return Err(bad());
        }
        Ok(ScanGeom {
            batch: u[0],
            t_len: u[1],
            nodes: u[2],
            ch: u[3],
            state: b[3],
        })
    }

    fn seq_idx(&self, b: usize, t: usize, n: usize, width: usize) -> usize {
        ((b * self.t_len + t) * self.nodes + n) * width
    }

    /// Offset of the saved state `h_t` for sequence `(b, n)`.
    fn state_idx(&self, b: usize, n: usize, t: usize) -> usize {
        ((b * self.nodes + n) * self.t_len + t) * self.ch * self.state
    }
}

#[allow(clippy::too_many_arguments)]
fn scan_forward(
    geom: &ScanGeom,
    u: &Tensor,
    delta: &Tensor,
    bm: &Tensor,
    cm: &Tensor,
    a: &Tensor,
    d: &Tensor,
    keep_states: bool,
) -> (Tensor, Vec<f64>) {
    let (ch, st) = (geom.ch, geom.state);
    let (ud, dd, bd, cd, ad, skip) = (u.data(), delta.data(), bm.data(), cm.data(), a.data(), d.data());
    let mut y = vec![0.0; u.numel()];
    let mut states = if keep_states {
        vec![0.0; geom.batch * geom.nodes * geom.t_len * ch * st]
    } else {
        Vec::new()
    };
    let mut h = vec![0.0; ch * st];
    for b in 0..geom.batch {
        for n in 0..geom.nodes {
            h.iter_mut().for_each(|x| *x = 0.0);
            for t in 0..geom.t_len {
                let iu = geom.seq_idx(b, t, n, ch);
                let is = geom.seq_idx(b, t, n, st);
                let bt = &bd[is..is + st];
                let ct = &cd[is..is + st];
                for c in 0..ch {
                    let dt = dd[iu + c];
                    let uv = ud[iu + c];
                    let du = dt * uv;
                    let hrow = &mut h[c * st..(c + 1) * st];
                    let arow = &ad[c * st..(c + 1) * st];
                    for ((hv, &av), &bv) in hrow.iter_mut().zip(arow).zip(bt) {
                        *hv = kernels::exp(dt * av) * *hv + du * bv;
                    }
                    let acc: f64 = hrow.iter().zip(ct).map(|(hv, cv)| hv * cv).sum();
                    y[iu + c] = acc + skip[c] * uv;
                }
                if keep_states {
                    let o = geom.state_idx(b, n, t);
                    states[o..o + ch * st].copy_from_slice(&h);
                }
            }
        }
    }
    (Tensor::from_parts(u.shape().to_vec(), y), states)
}

fn scan_backward(geom: &ScanGeom, vals: &[Rc<Tensor>; 6], states: &[f64], g: &Tensor) -> Vec<Option<Tensor>> {
    let (ch, st) = (geom.ch, geom.state);
    let [u, delta, bm, cm, a, d] = vals;
    let (ud, dd, bd, cd, ad, skip, gd) = (
        u.data(),
        delta.data(),
        bm.data(),
        cm.data(),
        a.data(),
        d.data(),
        g.data(),
    );
    let mut gu = vec![0.0; u.numel()];
    let mut gdelta = vec![0.0; u.numel()];
    let mut gb = vec![0.0; bm.numel()];
    let mut gc = vec![0.0; cm.numel()];
    let mut ga = vec![0.0; a.numel()];
    let mut gskip = vec![0.0; d.numel()];
    let mut gh = vec![0.0; ch * st];
    for b in 0..geom.batch {
        for n in 0..geom.nodes {
            gh.iter_mut().for_each(|x| *x = 0.0);
            for t in (0..geom.t_len).rev() {
                let iu = geom.seq_idx(b, t, n, ch);
                let is = geom.seq_idx(b, t, n, st);
                let h_t = &states[geom.state_idx(b, n, t)..geom.state_idx(b, n, t) + ch * st];
                let h_prev = if t > 0 {
                    Some(&states[geom.state_idx(b, n, t - 1)..geom.state_idx(b, n, t - 1) + ch * st])
                } else {
                    None
                };
                for c in 0..ch {
                    let gy = gd[iu + c];
                    let dt = dd[iu + c];
                    let uv = ud[iu + c];
                    gskip[c] += gy * uv;
                    let mut g_u = gy * skip[c];
                    let mut g_dt = 0.0;
                    for j in 0..st {
                        let hs = c * st + j;
                        gc[is + j] += gy * h_t[hs];
                        let mut ghv = gh[hs] + gy * cd[is + j];
                        let av = ad[hs];
                        let decay = kernels::exp(dt * av);
                        if let Some(hp) = h_prev {
                            let g_decay = ghv * hp[hs] * decay;
                            g_dt += g_decay * av;
                            ga[hs] += g_decay * dt;
                        }
                        let bj = bd[is + j];
                        g_dt += ghv * bj * uv;
                        gb[is + j] += ghv * dt * uv;
                        g_u += ghv * dt * bj;
                        ghv *= decay;
                        gh[hs] = ghv;
                    }
                    gu[iu + c] += g_u;
                    gdelta[iu + c] += g_dt;
                }
            }
        }
    }
    let t = |src: &Rc<Tensor>, v: Vec<f64>| Some(Tensor::from_parts(src.shape().to_vec(), v));
    vec![
        t(u, gu),
        t(delta, gdelta),
        t(bm, gb),
        t(cm, gc),
        t(a, ga),
        t(d, gskip),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn param_names_are_unique_and_shapes_fixed() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(vec![2])).is_err());
        assert!(s.set("w", Tensor::zeros(vec![3])).is_err());
        s.set("w", Tensor::ones(vec![2])).unwrap();
        assert_eq!(s.get("w").unwrap().sum(), 2.0);
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let s = store_with(&[("p", Tensor::from_vec(vec![1.0, -2.0, 3.0]))]);
        let g = Graph::new(&s, true);
        let p = g.param("p").unwrap();
        let loss = g.sum(&p);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads["p"].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_half_norm_is_identity() {
        let s = store_with(&[("p", Tensor::from_vec(vec![0.5, -2.0, 3.0]))]);
        let g = Graph::new(&s, true);
        let p = g.param("p").unwrap();
        let loss = g.scale(&g.sum(&g.square(&p)), 0.5);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads["p"].data(), &[0.5, -2.0, 3.0]);
    }

    #[test]
    fn unreachable_params_are_absent() {
        let s = store_with(&[("a", Tensor::scalar(1.0)), ("b", Tensor::scalar(2.0))]);
        let g = Graph::new(&s, true);
        let a = g.param("a").unwrap();
        let _b = g.param("b").unwrap();
        let grads = g.backward(&g.square(&a)).unwrap();
        assert!(grads.contains_key("a"));
        assert!(!grads.contains_key("b"));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let s = store_with(&[("a", Tensor::zeros(vec![2]))]);
        let g = Graph::new(&s, true);
        let a = g.param("a").unwrap();
        assert!(g.backward(&a).is_err());
    }

    #[test]
    fn inference_graph_records_nothing() {
        let s = store_with(&[("a", Tensor::ones(vec![3]))]);
        let g = Graph::inference(&s);
        let a = g.param("a").unwrap();
        let y = g.tanh(&g.square(&a));
        assert!(!y.requires_grad());
        assert_eq!(g.tape_len(), 0);
    }

    #[test]
    fn broadcast_suffix_and_scalar() {
        let s = ParamStore::new();
        let g = Graph::inference(&s);
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_vec(vec![10.0, 20.0]));
        assert_eq!(g.add(&x, &b).unwrap().value().data(), &[11.0, 22.0, 13.0, 24.0]);
        let c = g.constant(Tensor::scalar(2.0));
        assert_eq!(g.mul(&c, &x).unwrap().value().data(), &[2.0, 4.0, 6.0, 8.0]);
        let bad = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(g.add(&x, &bad).is_err());
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let s = store_with(&[("p", Tensor::scalar(3.0))]);
        let g = Graph::new(&s, true);
        let p1 = g.param("p").unwrap();
        let p2 = g.param("p").unwrap();
        let loss = g.mul(&p1, &p2).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads["p"].data(), &[6.0]);
    }
}
