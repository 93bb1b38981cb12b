//! Dense f64 tensors and a reverse-mode tape covering the operations the
//! upsampling network needs.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! holding its output value together with whatever it needs for the backward
//! pass (argmax routes, nearest-neighbour matches, gather indices). Calling
//! [`Tape::backward`] replays the nodes in reverse insertion order exactly once.
//!
//! Shapes are explicit everywhere: the only broadcast is the bias add inside
//! [`Tape::linear`].

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

/// Row-major dense array of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `[rows.len(), C]` matrix. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Number of rows when the tensor is viewed as `[numel / channels, channels]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.channels()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.channels();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    Concat { a: Var, b: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    ReduceMax { x: Var, k: usize, argmax: Vec<usize> },
    RepeatRows { x: Var, times: usize },
    Reshape { x: Var },
    Fuse { inputs: Vec<Var>, w: Var, eps: f64 },
    Chamfer { a: Var, b: Var, a_to_b: Vec<usize>, b_to_a: Vec<usize> },
    Repulsion { x: Var, pairs: Vec<(usize, usize)>, h: f64, norm: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fingerprint: Option<DefaultHasher>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that hashes every discrete decision taken during the forward
    /// pass (relu masks, max routes, neighbour sets). Two evaluations with the
    /// same fingerprint took the same smooth branch.
    pub fn with_fingerprint() -> Self {
        Tape {
            nodes: Vec::new(),
            fingerprint: Some(DefaultHasher::new()),
        }
    }

    pub fn fingerprint(&self) -> Option<u64> {
        self.fingerprint.as_ref().map(|h| h.finish())
    }

    /// Mixes externally computed decisions (e.g. kNN graphs) into the fingerprint.
    pub fn record_decision<T: Hash + ?Sized>(&mut self, decision: &T) {
        if let Some(h) = self.fingerprint.as_mut() {
            decision.hash(h);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(format!("variable {} is not on this tape", v.0)))
        }
    }

    /// Per-row affine map `x · W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() < 2 || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xs,
                right: ws,
            });
        }
        let (cin, cout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    left: ws,
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let rows = xv.len() / cin;
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(bv);
            }
        }
        for r in 0..rows {
            let xr = &xv[r * cin..(r + 1) * cin];
            let or = &mut out[r * cout..(r + 1) * cout];
            for (i, &xi) in xr.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wr = &wv[i * cout..(i + 1) * cout];
                for (o, &wij) in or.iter_mut().zip(wr) {
                    *o += xi * wij;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(Tensor { shape, data: out }, Op::Linear { x, w, b }, rg))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = xv.shape().to_vec();
        if let Some(h) = self.fingerprint.as_mut() {
            for &v in self.nodes[x.0].value.data() {
                (v > 0.0).hash(h);
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Relu { x }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor { shape, data }, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Scale { x, factor }, rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a);
        let bs = self.shape(b);
        if as_.len() != bs.len() || as_[..as_.len() - 1] != bs[..bs.len() - 1] {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: as_.to_vec(),
                right: bs.to_vec(),
            });
        }
        let ca = *as_.last().unwrap();
        let cb = *bs.last().unwrap();
        let mut shape = as_.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let rows = av.len() / ca;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Concat { a, b }, rg))
    }

    /// `out[q, j, :] = x[idx[q][j], :]` for `x: [M, C]`.
    pub fn gather_rows<I: AsRef<[usize]>>(&mut self, x: Var, idx: &[I]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: xs,
                right: vec![],
            });
        }
        let (m, c) = (xs[0], xs[1]);
        let k = idx.first().map_or(0, |r| r.as_ref().len());
        if idx.is_empty() || k == 0 {
            return Err(Error::invalid("gather_rows needs a non-empty index table"));
        }
        let mut flat = Vec::with_capacity(idx.len() * k);
        for r in idx {
            let r = r.as_ref();
            if r.len() != k {
                return Err(Error::invalid("gather_rows index table is ragged"));
            }
            for &i in r {
                if i >= m {
                    return Err(Error::IndexOutOfBounds {
                        op: "gather_rows",
                        index: i,
                        extent: m,
                    });
                }
                flat.push(i);
            }
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(flat.len() * c);
        for &i in &flat {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let shape = vec![idx.len(), k, c];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::GatherRows { x, idx: flat }, rg))
    }

    /// Channelwise max over axis 1 of `[M, k, C]`. The backward pass routes to
    /// the first maximal neighbour.
    pub fn reduce_max_axis1(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "reduce_max_axis1",
                left: xs,
                right: vec![],
            });
        }
        let (m, k, c) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut data = vec![f64::NEG_INFINITY; m * c];
        let mut argmax = vec![0usize; m * c];
        for i in 0..m {
            for j in 0..k {
                let row = &xv[(i * k + j) * c..(i * k + j + 1) * c];
                for ch in 0..c {
                    if j == 0 || row[ch] > data[i * c + ch] {
                        data[i * c + ch] = row[ch];
                        argmax[i * c + ch] = j;
                    }
                }
            }
        }
        self.record_decision(&argmax);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![m, c],
                data,
            },
            Op::ReduceMax { x, k, argmax },
            rg,
        ))
    }

    /// Row `m` of `[M, C]` becomes rows `u·m .. u·m+u-1` of `[uM, C]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times < 1 {
            return Err(Error::invalid("repeat_rows needs u >= 1"));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "repeat_rows",
                left: xs,
                right: vec![],
            });
        }
        let (m, c) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(m * times * c);
        for r in 0..m {
            for _ in 0..times {
                data.extend_from_slice(&xv[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![m * times, c],
                data,
            },
            Op::RepeatRows { x, times },
            rg,
        ))
    }

    /// `[uM, C] -> [M, uC]`: rows `u·m .. u·m+u-1` concatenate into row `m`.
    /// With row-major storage this is a pure reshape.
    pub fn group_channels(&mut self, x: Var, group: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if group < 1 || xs.len() != 2 || !xs[0].is_multiple_of(group) {
            return Err(Error::ShapeMismatch {
                op: "group_channels",
                left: xs,
                right: vec![group],
            });
        }
        let shape = vec![xs[0] / group, xs[1] * group];
        let data = self.value(x).data().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Reshape { x }, rg))
    }

    /// Normalized weighted fusion `Σ relu(w_i)·x_i / (Σ relu(w_i) + eps)`.
    pub fn fuse(&mut self, inputs: &[Var], w: Var, eps: f64) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("fuse needs at least one input"))?;
        for &v in &inputs[1..] {
            self.same_shape("fuse", first, v)?;
        }
        if self.shape(w) != [inputs.len()] {
            return Err(Error::ShapeMismatch {
                op: "fuse weights",
                left: vec![inputs.len()],
                right: self.shape(w).to_vec(),
            });
        }
        let rw: Vec<f64> = self.value(w).data().iter().map(|&v| v.max(0.0)).collect();
        let denom: f64 = rw.iter().sum::<f64>() + eps;
        if !(denom > 0.0) {
            return Err(Error::Numeric(
                "fusion denominator is not positive".to_string(),
            ));
        }
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).numel()];
        for (&v, &r) in inputs.iter().zip(&rw) {
            if r == 0.0 {
                continue;
            }
            for (o, &x) in data.iter_mut().zip(self.value(v).data()) {
                *o += r * x;
            }
        }
        for o in &mut data {
            *o /= denom;
        }
        let masks: Vec<bool> = self.value(w).data().iter().map(|&v| v > 0.0).collect();
        self.record_decision(&masks);
        let rg = self.rg(inputs) || self.rg(&[w]);
        Ok(self.push(
            Tensor { shape, data },
            Op::Fuse {
                inputs: inputs.to_vec(),
                w,
                eps,
            },
            rg,
        ))
    }

    /// Symmetric Chamfer distance between `[M1, D]` and `[M2, D]`: mean squared
    /// nearest-neighbour distance in each direction, summed.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(Error::ShapeMismatch {
                op: "chamfer",
                left: as_,
                right: bs,
            });
        }
        let d = as_[1];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (a_to_b, sa) = nearest_rows(av, bv, d);
        let (b_to_a, sb) = nearest_rows(bv, av, d);
        let value = sa / as_[0] as f64 + sb / bs[0] as f64;
        self.record_decision(&a_to_b);
        self.record_decision(&b_to_a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Chamfer {
                a,
                b,
                a_to_b,
                b_to_a,
            },
            rg,
        ))
    }

    /// Repulsion term over each point's `k` nearest other points:
    /// `(1/(M·k)) Σ_i Σ_j −d_ij · exp(−d_ij² / h²)`.
    pub fn repulsion(&mut self, x: Var, k: usize, h: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "repulsion",
                left: xs,
                right: vec![],
            });
        }
        let (m, d) = (xs[0], xs[1]);
        if k == 0 || k >= m {
            return Err(Error::invalid(format!(
                "repulsion needs 0 < K < M, got K={k}, M={m}"
            )));
        }
        if !(h > 0.0) {
            return Err(Error::invalid("repulsion radius must be positive"));
        }
        let xv = self.value(x).data();
        let mut pairs = Vec::with_capacity(m * k);
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m);
        let mut total = 0.0;
        for i in 0..m {
            cand.clear();
            let xi = &xv[i * d..(i + 1) * d];
            for j in 0..m {
                if j != i {
                    cand.push((sq_dist(xi, &xv[j * d..(j + 1) * d]), j));
                }
            }
            select_k_smallest(&mut cand, k);
            for &(d2, j) in &cand[..k] {
                let dist = d2.sqrt();
                total += -dist * (-d2 / (h * h)).exp();
                pairs.push((i, j));
            }
        }
        self.record_decision(&pairs);
        let norm = 1.0 / (m * k) as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(total * norm),
            Op::Repulsion { x, pairs, h, norm },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_var(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut out: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out[i] = Some(Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    });
                }
                Op::Linear { x, w, b } => {
                    let cout = node.value.channels();
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let cin = self.value(*w).shape()[0];
                    let rows = xv.len() / cin;
                    if self.nodes[x.0].requires_grad {
                        self.accumulate(&mut grads, *x, |dx| {
                            for r in 0..rows {
                                let gr = &g[r * cout..(r + 1) * cout];
                                let dxr = &mut dx[r * cin..(r + 1) * cin];
                                for (ii, d) in dxr.iter_mut().enumerate() {
                                    let wr = &wv[ii * cout..(ii + 1) * cout];
                                    *d += dot(gr, wr);
                                }
                            }
                        });
                    }
                    if self.nodes[w.0].requires_grad {
                        self.accumulate(&mut grads, *w, |dw| {
                            for r in 0..rows {
                                let gr = &g[r * cout..(r + 1) * cout];
                                let xr = &xv[r * cin..(r + 1) * cin];
                                for (ii, &xi) in xr.iter().enumerate() {
                                    if xi == 0.0 {
                                        continue;
                                    }
                                    let dwr = &mut dw[ii * cout..(ii + 1) * cout];
                                    for (d, &gj) in dwr.iter_mut().zip(gr) {
                                        *d += xi * gj;
                                    }
                                }
                            }
                        });
                    }
                    if let Some(b) = b {
                        if self.nodes[b.0].requires_grad {
                            self.accumulate(&mut grads, *b, |db| {
                                for r in 0..rows {
                                    for (d, &gj) in db.iter_mut().zip(&g[r * cout..(r + 1) * cout]) {
                                        *d += gj;
                                    }
                                }
                            });
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    self.accumulate(&mut grads, *x, |dx| {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(xv) {
                            if xv > 0.0 {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, |da| add_into(da, &g));
                    self.accumulate(&mut grads, *b, |db| add_into(db, &g));
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut grads, *a, |da| add_into(da, &g));
                    self.accumulate(&mut grads, *b, |db| {
                        for (d, &gv) in db.iter_mut().zip(&g) {
                            *d -= gv;
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    self.accumulate(&mut grads, *a, |da| {
                        for ((d, &gv), &y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gv * y;
                        }
                    });
                    self.accumulate(&mut grads, *b, |db| {
                        for ((d, &gv), &y) in db.iter_mut().zip(&g).zip(av) {
                            *d += gv * y;
                        }
                    });
                }
                Op::Scale { x, factor } => {
                    self.accumulate(&mut grads, *x, |dx| {
                        for (d, &gv) in dx.iter_mut().zip(&g) {
                            *d += gv * factor;
                        }
                    });
                }
                Op::Sum { x } => {
                    let g0 = g[0];
                    self.accumulate(&mut grads, *x, |dx| {
                        for d in dx.iter_mut() {
                            *d += g0;
                        }
                    });
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).channels();
                    let cb = self.value(*b).channels();
                    let rows = g.len() / (ca + cb);
                    self.accumulate(&mut grads, *a, |da| {
                        for r in 0..rows {
                            add_into(
                                &mut da[r * ca..(r + 1) * ca],
                                &g[r * (ca + cb)..r * (ca + cb) + ca],
                            );
                        }
                    });
                    self.accumulate(&mut grads, *b, |db| {
                        for r in 0..rows {
                            add_into(
                                &mut db[r * cb..(r + 1) * cb],
                                &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                            );
                        }
                    });
                }
                Op::GatherRows { x, idx } => {
                    let c = self.value(*x).channels();
                    self.accumulate(&mut grads, *x, |dx| {
                        for (slot, &src) in idx.iter().enumerate() {
                            add_into(&mut dx[src * c..(src + 1) * c], &g[slot * c..(slot + 1) * c]);
                        }
                    });
                }
                Op::ReduceMax { x, k, argmax } => {
                    let c = node.value.channels();
                    let k = *k;
                    self.accumulate(&mut grads, *x, |dx| {
                        for (pos, &j) in argmax.iter().enumerate() {
                            let (row, ch) = (pos / c, pos % c);
                            dx[(row * k + j) * c + ch] += g[pos];
                        }
                    });
                }
                Op::RepeatRows { x, times } => {
                    let c = node.value.channels();
                    self.accumulate(&mut grads, *x, |dx| {
                        for (r, dr) in dx.chunks_mut(c).enumerate() {
                            for t in 0..*times {
                                let src = r * times + t;
                                add_into(dr, &g[src * c..(src + 1) * c]);
                            }
                        }
                    });
                }
                Op::Reshape { x } => {
                    self.accumulate(&mut grads, *x, |dx| add_into(dx, &g));
                }
                Op::Fuse { inputs, w, eps } => {
                    let wv = self.value(*w).data();
                    let rw: Vec<f64> = wv.iter().map(|&v| v.max(0.0)).collect();
                    let denom: f64 = rw.iter().sum::<f64>() + eps;
                    let outv = node.value.data();
                    for (v, &r) in inputs.iter().zip(&rw) {
                        if r == 0.0 {
                            continue;
                        }
                        let s = r / denom;
                        self.accumulate(&mut grads, *v, |dv| {
                            for (d, &gv) in dv.iter_mut().zip(&g) {
                                *d += gv * s;
                            }
                        });
                    }
                    if self.nodes[w.0].requires_grad {
                        let dw: Vec<f64> = inputs
                            .iter()
                            .zip(wv)
                            .map(|(v, &wi)| {
                                if wi <= 0.0 {
                                    return 0.0;
                                }
                                let xv = self.value(*v).data();
                                let mut acc = 0.0;
                                for ((&gv, &xi), &o) in g.iter().zip(xv).zip(outv) {
                                    acc += gv * (xi - o);
                                }
                                acc / denom
                            })
                            .collect();
                        self.accumulate(&mut grads, *w, |d| add_into(d, &dw));
                    }
                }
                Op::Chamfer {
                    a,
                    b,
                    a_to_b,
                    b_to_a,
                } => {
                    let g0 = g[0];
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let d = self.value(*a).channels();
                    let (ma, mb) = (a_to_b.len(), b_to_a.len());
                    let sa = 2.0 * g0 / ma as f64;
                    let sb = 2.0 * g0 / mb as f64;
                    let ra = self.nodes[a.0].requires_grad;
                    let rb = self.nodes[b.0].requires_grad;
                    let mut da = if ra { vec![0.0; av.len()] } else { Vec::new() };
                    let mut db = if rb { vec![0.0; bv.len()] } else { Vec::new() };
                    for (i, &j) in a_to_b.iter().enumerate() {
                        for c in 0..d {
                            let diff = av[i * d + c] - bv[j * d + c];
                            if ra {
                                da[i * d + c] += sa * diff;
                            }
                            if rb {
                                db[j * d + c] -= sa * diff;
                            }
                        }
                    }
                    for (j, &i) in b_to_a.iter().enumerate() {
                        for c in 0..d {
                            let diff = bv[j * d + c] - av[i * d + c];
                            if rb {
                                db[j * d + c] += sb * diff;
                            }
                            if ra {
                                da[i * d + c] -= sb * diff;
                            }
                        }
                    }
                    if ra {
                        self.accumulate(&mut grads, *a, |dst| add_into(dst, &da));
                    }
                    if rb {
                        self.accumulate(&mut grads, *b, |dst| add_into(dst, &db));
                    }
                }
                Op::Repulsion { x, pairs, h, norm } => {
                    let s = g[0] * norm;
                    let xv = self.value(*x).data();
                    let d = self.value(*x).channels();
                    let h2 = h * h;
                    self.accumulate(&mut grads, *x, |dx| {
                        for &(i, j) in pairs {
                            let xi = &xv[i * d..(i + 1) * d];
                            let xj = &xv[j * d..(j + 1) * d];
                            let d2 = sq_dist(xi, xj);
                            if d2 == 0.0 {
                                continue;
                            }
                            let dist = d2.sqrt();
                            // d/dd [−d·exp(−d²/h²)]
                            let df = -(-d2 / h2).exp() * (1.0 - 2.0 * d2 / h2);
                            let coef = s * df / dist;
                            for c in 0..d {
                                let diff = xi[c] - xj[c];
                                dx[i * d + c] += coef * diff;
                                dx[j * d + c] -= coef * diff;
                            }
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let t = x - y;
        s += t * t;
    }
    s
}

/// Moves the `k` smallest `(distance, index)` pairs, ascending, to the front.
pub(crate) fn select_k_smallest(cand: &mut [(f64, usize)], k: usize) {
    let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
    }
    cand[..k].sort_unstable_by(cmp);
}

/// For every row of `from`, the index of its nearest row in `to` (lowest index
/// on ties) and the sum of those squared distances.
fn nearest_rows(from: &[f64], to: &[f64], d: usize) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let nn = from
        .chunks_exact(d)
        .map(|p| {
            let mut best = f64::INFINITY;
            let mut arg = 0;
            for (j, q) in to.chunks_exact(d).enumerate() {
                let s = sq_dist(p, q);
                if s < best {
                    best = s;
                    arg = j;
                }
            }
            total += best;
            arg
        })
        .collect();
    (nn, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn linear_identity_and_hand_product() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[[1.0, 2.0]]));
        let w = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);

        let x = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let w = t.constant(Tensor::from_rows(&[[2.0, 0.0], [0.0, 3.0]]));
        let b = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 1.0, 1.0, 4.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3]));
        let w = t.constant(Tensor::zeros(&[2, 4]));
        let err = t.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn linear_bias_gradient_counts_rows() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![4, 3], (0..12).map(|v| v as f64 * 0.1).collect()).unwrap());
        let w = t.param(Tensor::full(&[3, 2], 0.5));
        let b = t.param(Tensor::zeros(&[2]));
        let y = t.linear(x, w, Some(b)).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn relu_values_and_mask() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 3.0]));
        let y = t.relu(x);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
        let fd = finite_diff(&|v| v.iter().map(|x| x.max(0.0)).sum(), &[-1.0, 3.0], 1e-5);
        assert!((fd[0] - 0.0).abs() < 1e-9 && (fd[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn concat_and_gather() {
        let mut t = Tape::new();
        let a = t.param(Tensor::from_rows(&[[1.0]]));
        let b = t.param(Tensor::from_rows(&[[2.0]]));
        let c = t.concat_channels(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0]);
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0]);

        let a = t.constant(Tensor::zeros(&[4, 3]));
        let b = t.constant(Tensor::zeros(&[4, 5]));
        let c = t.concat_channels(a, b).unwrap();
        assert_eq!(t.shape(c), &[4, 8]);
        let b3 = t.constant(Tensor::zeros(&[3, 5]));
        assert!(t.concat_channels(a, b3).is_err());

        let mut t = Tape::new();
        let x = t.param(Tensor::from_rows(&[[7.0, 8.0]]));
        let y = t.gather_rows(x, &[[0usize]]).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2]);
        assert_eq!(t.value(y).data(), &[7.0, 8.0]);
        let y2 = t.gather_rows(x, &[[0usize, 0]]).unwrap();
        let s = t.sum(y2);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
        assert!(matches!(
            t.gather_rows(x, &[[1usize]]),
            Err(Error::IndexOutOfBounds { .. })
        ));

        let x = t.constant(Tensor::from_rows(&[[1.0], [2.0]]));
        let y = t.gather_rows(x, &[[1usize, 0]]).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 1.0]);
    }

    #[test]
    fn reduce_max_routes_to_first_max() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let y = t.reduce_max_axis1(x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 5.0]);

        let x = t.param(Tensor::new(vec![1, 2, 1], vec![2.0, 2.0]).unwrap());
        let y = t.reduce_max_axis1(x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);

        let x = t.constant(Tensor::new(vec![2, 1, 3], (0..6).map(f64::from).collect()).unwrap());
        let y = t.reduce_max_axis1(x).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn repeat_and_group_layout() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_rows(&[[1.0], [2.0]]));
        let r = t.repeat_rows(x, 2).unwrap();
        assert_eq!(t.value(r).data(), &[1.0, 1.0, 2.0, 2.0]);
        let same = t.repeat_rows(x, 1).unwrap();
        assert_eq!(t.value(same), t.value(x));
        assert!(t.repeat_rows(x, 0).is_err());
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);

        let y = t.constant(Tensor::from_rows(&[[1.0], [2.0], [3.0], [4.0]]));
        let gch = t.group_channels(y, 2).unwrap();
        assert_eq!(t.shape(gch), &[2, 2]);
        assert_eq!(t.value(gch).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(t.group_channels(y, 3).is_err());
        let id = t.group_channels(y, 1).unwrap();
        assert_eq!(t.value(id), t.value(y));
    }

    #[test]
    fn repeat_then_group_duplicates_channel_blocks() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]));
        let r = t.repeat_rows(x, 3).unwrap();
        let g = t.group_channels(r, 3).unwrap();
        assert_eq!(t.shape(g), &[2, 9]);
        for m in 0..2 {
            let row = t.value(g).row(m);
            for block in row.chunks(3) {
                assert_eq!(block, t.value(x).row(m));
            }
        }
    }

    #[test]
    fn backward_sum_and_reuse() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let s1 = t.sum(x);
        let s2 = t.sum(x);
        let l = t.add(s1, s2).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
        assert!(t.backward(Var(99)).is_err());
    }

    #[test]
    fn fuse_hand_cases() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::full(&[2, 2], 0.0));
        let b = t.constant(Tensor::full(&[2, 2], 4.0));
        let w = t.param(Tensor::vector(vec![1.0, 3.0]));
        let f = t.fuse(&[a, b], w, 0.0).unwrap();
        assert!(t.value(f).data().iter().all(|&v| v == 3.0));

        let w = t.param(Tensor::vector(vec![-5.0, 2.0]));
        let c = t.constant(Tensor::from_rows(&[[1.5, -2.0], [0.25, 9.0]]));
        let f = t.fuse(&[a, c], w, 0.0).unwrap();
        assert_eq!(t.value(f), t.value(c));

        let w1 = t.param(Tensor::vector(vec![1.0]));
        assert!(t.fuse(&[a, b], w1, 0.0).is_err());
        let wneg = t.param(Tensor::vector(vec![-1.0, -1.0]));
        assert!(t.fuse(&[a, b], wneg, 0.0).is_err());
    }

    #[test]
    fn chamfer_hand_cases() {
        let mut t = Tape::new();
        let a = t.param(Tensor::from_rows(&[[0.0, 0.0, 0.0]]));
        let b = t.param(Tensor::from_rows(&[[3.0, 4.0, 0.0]]));
        let c = t.chamfer(a, b).unwrap();
        assert_eq!(t.value(c).item(), 50.0);

        let a = t.param(Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]));
        let b = t.param(Tensor::from_rows(&[[0.0, 0.0, 0.0]]));
        let c = t.chamfer(a, b).unwrap();
        assert_eq!(t.value(c).item(), 0.5);
        let c = t.chamfer(a, a).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
    }

    #[test]
    fn repulsion_closed_forms() {
        let h = 0.03;
        let mut t = Tape::new();
        let x = t.param(Tensor::from_rows(&[[0.0, 0.0, 0.0], [h, 0.0, 0.0]]));
        let r = t.repulsion(x, 1, h).unwrap();
        let expect = -h * (-1.0f64).exp();
        assert!((t.value(r).item() - expect).abs() < 1e-15);

        let x = t.param(Tensor::from_rows(&[[0.0, 0.0, 0.0], [10.0 * h, 0.0, 0.0]]));
        let r = t.repulsion(x, 1, h).unwrap();
        let v = t.value(r).item();
        assert!(v < 0.0 && v.abs() < 1e-6);

        let x = t.param(Tensor::from_rows(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]));
        let r = t.repulsion(x, 1, h).unwrap();
        assert_eq!(t.value(r).item(), 0.0);
        let g = t.backward(r).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(t.repulsion(x, 2, h).is_err());
    }

    #[test]
    fn composed_gradient_matches_finite_differences() {
        let xs = [0.3, -0.7, 1.1, 0.4, -0.2, 0.9];
        let ws = [0.5, -0.3, 0.8, 0.1, -0.6, 0.4];
        let bs = [0.05, -0.02];
        let eval = |x: &[f64], w: &[f64], b: &[f64]| -> (f64, Gradients, Var, Var, Var) {
            let mut t = Tape::new();
            let xv = t.param(Tensor::new(vec![2, 3], x.to_vec()).unwrap());
            let wv = t.param(Tensor::new(vec![3, 2], w.to_vec()).unwrap());
            let bv = t.param(Tensor::vector(b.to_vec()));
            let y = t.linear(xv, wv, Some(bv)).unwrap();
            let r = t.relu(y);
            let s = t.sum(r);
            let g = t.backward(s).unwrap();
            (t.value(s).item(), g, xv, wv, bv)
        };
        let (_, g, xv, wv, _) = eval(&xs, &ws, &bs);
        let fx = finite_diff(&|x| eval(x, &ws, &bs).0, &xs, 1e-5);
        let fw = finite_diff(&|w| eval(&xs, w, &bs).0, &ws, 1e-5);
        for (a, n) in g.get(xv).unwrap().data().iter().zip(&fx) {
            assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1e-3), "{a} vs {n}");
        }
        for (a, n) in g.get(wv).unwrap().data().iter().zip(&fw) {
            assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1e-3), "{a} vs {n}");
        }
    }
}
