//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse.

use crate::error::{Error, Result};
use crate::kernels::{self, BilinearAxis, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Max,
    Min,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Recip(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    Reduce {
        x: Var,
        kind: Reduction,
        view: (usize, usize, usize),
        picked: Vec<usize>,
    },
    Expand {
        x: Var,
        view: (usize, usize, usize),
    },
    Reshape(Var),
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        view: (usize, usize, usize),
    },
    Standardize {
        x: Var,
        inv_std: Vec<f64>,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    Bilinear {
        x: Var,
        ay: BilinearAxis,
        ax: BilinearAxis,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Concat(Vec<Var>),
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    Narrow {
        x: Var,
        offset: usize,
    },
    Huber {
        pred: Var,
        target: Var,
        delta: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus, after [`Graph::backward`], the gradients of
/// every node that participates in the loss.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked or not.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    /// Gradient as a tensor, zero-filled when the node was not reached.
    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, va, vb)?;
        let value = va.zip_map(vb, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum of several same-shape nodes.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::contract("add_all needs at least one term"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Reduces `axis` away.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: Reduction) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = kernels::axis_view(&shape, axis)?;
        if n == 0 {
            return Err(Error::shape("reduce", "empty axis"));
        }
        let data = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * inner];
        let mut picked = Vec::new();
        if kind != Reduction::Sum {
            picked = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| data[(o * n + j) * inner + i];
                let slot = o * inner + i;
                match kind {
                    Reduction::Sum => out[slot] = (0..n).map(at).sum(),
                    Reduction::Max | Reduction::Min => {
                        let mut best = 0;
                        for j in 1..n {
                            let better = match kind {
                                Reduction::Max => at(j) > at(best),
                                _ => at(j) < at(best),
                            };
                            if better {
                                best = j;
                            }
                        }
                        picked[slot] = best;
                        out[slot] = at(best);
                    }
                }
            }
        }
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(&new_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Reduce {
                x,
                kind,
                view: (outer, n, inner),
                picked,
            },
            rg,
        ))
    }

    /// Inserts a new axis of extent `n` at `axis` by replication.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let shape = if shape == [1] && axis == 0 { vec![] } else { shape };
        if axis > shape.len() {
            return Err(Error::shape("expand", format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * n * inner];
        for o in 0..outer {
            let s = &src[o * inner..(o + 1) * inner];
            for j in 0..n {
                out[(o * n + j) * inner..(o * n + j + 1) * inner].copy_from_slice(s);
            }
        }
        let mut new_shape = shape.clone();
        new_shape.insert(axis, n);
        let value = Tensor::new(&new_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Expand {
                x,
                view: (outer, n, inner),
            },
            rg,
        ))
    }

    /// Length-`C` vector replicated over an `H x W` grid.
    pub fn broadcast_channels(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        if self.shape(v).len() != 1 {
            return Err(Error::shape(
                "broadcast_channels",
                format!("expected a vector, got {:?}", self.shape(v)),
            ));
        }
        let c = self.shape(v)[0];
        let e = self.expand(v, 1, h * w)?;
        self.reshape(e, &[c, h, w])
    }

    /// `[1, H, W]` map replicated across `c` channels.
    pub fn broadcast_map(&mut self, m: Var, c: usize) -> Result<Var> {
        let (mc, h, w) = self.value(m).dims3()?;
        if mc != 1 {
            return Err(Error::shape("broadcast_map", format!("expected 1 channel, got {mc}")));
        }
        let flat = self.reshape(m, &[h * w])?;
        let e = self.expand(flat, 0, c)?;
        self.reshape(e, &[c, h, w])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = match self.shape(x) {
            &[r, c] => (r, c),
            s => return Err(Error::shape("transpose", format!("expected rank 2, got {s:?}"))),
        };
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let value = Tensor::new(&[cols, rows], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose { x, rows, cols }, rg))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, k2, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), self.shape(b), stride, pad)?;
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(&[geom.c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = crate::ops::fully_connected(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let view = kernels::axis_view(self.shape(x), axis)?;
        let y = kernels::softmax_forward(self.value(x).data(), view.0, view.1, view.2);
        let value = Tensor::new(self.shape(x), y)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, view }, rg))
    }

    /// Per-channel standardization of a `[C, H, W]` map; returns the node with
    /// per-channel means and standard deviations.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (c, _, _) = self.value(x).dims3()?;
        self.standardize(x, c, eps)
    }

    /// Standardization of a `[C, H, W]` map with one shared mean and deviation.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<(Var, f64, f64)> {
        self.value(x).dims3()?;
        let (v, mu, sd) = self.standardize(x, 1, eps)?;
        Ok((v, mu[0], sd[0]))
    }

    fn standardize(&mut self, x: Var, groups: usize, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (y, mu, inv_std) = kernels::standardize(self.value(x).data(), groups, eps);
        let sd = inv_std.iter().map(|v| 1.0 / v).collect();
        let value = Tensor::new(self.shape(x), y)?;
        let rg = self.rg(x);
        Ok((self.push(value, Op::Standardize { x, inv_std }, rg), mu, sd))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = crate::ops::upsample_nearest(self.value(x), factor)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::UpsampleNearest { x, factor }, rg))
    }

    /// Bilinear resize to `h x w` with half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (c, hi, wi) = self.value(x).dims3()?;
        if h == 0 || w == 0 {
            return Err(Error::contract("bilinear target must be non-empty"));
        }
        let ay = BilinearAxis::new(hi, h);
        let ax = BilinearAxis::new(wi, w);
        let out = kernels::bilinear_forward(self.value(x).data(), c, hi, wi, &ay, &ax);
        let value = Tensor::new(&[c, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Bilinear { x, ay, ax }, rg))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = crate::ops::avg_pool(self.value(x), k)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool { x, k }, rg))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(value, Op::Concat(xs.to_vec()), rg))
    }

    /// Spatial crop `[C, y0..y0+h, x0..x0+w]`.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let value = crate::ops::crop(self.value(x), y0, x0, h, w)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Crop { x, y0, x0 }, rg))
    }

    /// Rows `start..start + len` of axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("rows {start}..{} of shape {shape:?}", start + len),
            ));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut new_shape = shape;
        new_shape[0] = len;
        let value = Tensor::new(&new_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, offset: start * row }, rg))
    }

    /// Mean Huber penalty of `|pred - target|`.
    pub fn huber(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var> {
        let v = crate::objectives::huber(self.value(pred), self.value(target), delta)?;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(v), Op::Huber { pred, target, delta }, rg))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(contrib) {
                        *b += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.rg(*a) {
                    acc(*a, g.iter().zip(vb).map(|(g, b)| g * b).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(va).map(|(g, a)| g * a).collect());
                }
            }
            Op::Affine(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Recip(x) => acc(*x, g.iter().zip(y).map(|(g, y)| -g * y * y).collect()),
            Op::Sqrt(x) => acc(*x, g.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect()),
            Op::Exp(x) => acc(*x, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(x) => acc(*x, g.iter().zip(val(*x)).map(|(g, x)| g / x).collect()),
            Op::Clamp(x, lo, hi) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid(x) => acc(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Tanh(x) => acc(*x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::LeakyRelu(x, s) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * s })
                    .collect(),
            ),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Reduce {
                x,
                kind,
                view: (outer, n, inner),
                picked,
            } => {
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let slot = o * inner + ii;
                        match kind {
                            Reduction::Sum => {
                                for j in 0..*n {
                                    dx[(o * n + j) * inner + ii] = g[slot];
                                }
                            }
                            _ => dx[(o * n + picked[slot]) * inner + ii] = g[slot],
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Expand {
                x,
                view: (outer, n, inner),
            } => {
                let mut dx = vec![0.0; outer * inner];
                for o in 0..*outer {
                    for j in 0..*n {
                        let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, s) in dx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Transpose { x, rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        dx[r * cols + c] = g[c * rows + r];
                    }
                }
                acc(*x, dx);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, (n as isize, 1), val(*b), (1, n as isize), 0.0, &mut da);
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), (1, k as isize), g, (n as isize, 1), 0.0, &mut db);
                    acc(*b, db);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (dx, dw, db) = kernels::conv2d_backward(g, val(*w), cols, geom, self.rg(*x));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (d_out, d_in) = (g.len(), xv.len());
                if self.rg(*x) {
                    let mut dx = vec![0.0; d_in];
                    for (o, &gv) in g.iter().enumerate() {
                        for (d, wv) in dx.iter_mut().zip(&wv[o * d_in..(o + 1) * d_in]) {
                            *d += gv * wv;
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; d_out * d_in];
                    for (o, &gv) in g.iter().enumerate() {
                        for (d, xv) in dw[o * d_in..(o + 1) * d_in].iter_mut().zip(xv) {
                            *d = gv * xv;
                        }
                    }
                    acc(*w, dw);
                }
                acc(*b, g.to_vec());
            }
            Op::Softmax { x, view } => {
                acc(*x, kernels::softmax_backward(y, g, view.0, view.1, view.2));
            }
            Op::Standardize { x, inv_std } => {
                acc(*x, kernels::standardize_backward(y, g, inv_std));
            }
            Op::UpsampleNearest { x, factor } => {
                let (c, h, w) = self.nodes[x.0].value.dims3().expect("rank 3");
                let f = *factor;
                let wo = w * f;
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oy in 0..h * f {
                        for ox in 0..wo {
                            dx[(ch * h + oy / f) * w + ox / f] += g[(ch * h * f + oy) * wo + ox];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Bilinear { x, ay, ax } => {
                let (c, h, w) = self.nodes[x.0].value.dims3().expect("rank 3");
                acc(*x, kernels::bilinear_backward(g, c, h, w, ay, ax));
            }
            Op::AvgPool { x, k } => {
                let (c, h, w) = self.nodes[x.0].value.dims3().expect("rank 3");
                let k = *k;
                let (ho, wo) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            dx[(ch * h + yy) * w + xx] = g[(ch * ho + yy / k) * wo + xx / k] * norm;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.0].value.numel();
                    acc(x, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Crop { x, y0, x0 } => {
                let (c, h, w) = self.nodes[x.0].value.dims3().expect("rank 3");
                let (_, ch_, cw) = node.value.dims3().expect("rank 3");
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..ch_ {
                        for xx in 0..cw {
                            dx[(ch * h + y0 + yy) * w + x0 + xx] = g[(ch * ch_ + yy) * cw + xx];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Narrow { x, offset } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                dx[*offset..*offset + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::Huber { pred, target, delta } => {
                let (p, t) = (val(*pred), val(*target));
                let n = p.len() as f64;
                let d: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(p, t)| g[0] * crate::objectives::huber_slope(p - t, *delta) / n)
                    .collect();
                if self.rg(*target) {
                    acc(*target, d.iter().map(|v| -v).collect());
                }
                acc(*pred, d);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
