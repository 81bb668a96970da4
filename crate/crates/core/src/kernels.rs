//! Numeric kernels shared by the differentiable graph and the plain tensor ops.
//!
//! Every kernel runs with a fixed reduction order so repeated calls on the same
//! inputs are bit-identical.

use crate::error::{Error, Result};

/// `c = a * b + beta * c` for row-major operands with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass slices whose extents cover every (row, col)
    // reachable through the given strides; `c` is dense row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = match input {
            &[c, h, w] => (c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input must be [C,H,W], got {input:?}"))),
        };
        let (c_out, wc_in, kh, kw) = match weight {
            &[a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight must be [C_out,C_in,k,k], got {weight:?}"),
                ))
            }
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("axis 1 of weight ({wc_in}) != axis 0 of input ({c_in})"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square with odd extent, got {kh}x{kw}"),
            ));
        }
        if bias != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{c_out}], got {bias:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        let k = kh;
        let span_h = (h + 2 * pad).checked_sub(k);
        let span_w = (w + 2 * pad).checked_sub(k);
        let (span_h, span_w) = match (span_h, span_w) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} exceeds padded input {h}x{w} (pad {pad})"),
                ))
            }
        };
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("(H+2*pad-k)/stride not integral for H={h}, W={w}, k={k}, pad={pad}, stride={stride}"),
            ));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: span_h / stride + 1,
            w_out: span_w / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![0.0; rows * cols];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let dst = &mut out[r * cols..(r + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, slot) in row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *slot = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols_buf: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols = g.cols();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let src = &cols_buf[r * cols..(r + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, &v) in row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation; returns the output and the im2col buffer.
pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], b: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let p = g.cols();
    let mut out = vec![0.0; g.c_out * p];
    for (co, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(b[co]);
    }
    let r = g.rows() as isize;
    gemm(g.c_out, g.rows(), p, wt, (r, 1), &cols, (p as isize, 1), 1.0, &mut out);
    (out, cols)
}

/// Gradients of the convolution w.r.t. input, weight and bias.
pub(crate) fn conv2d_backward(
    dout: &[f64],
    wt: &[f64],
    cols: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p = g.cols();
    let r = g.rows();
    let db: Vec<f64> = dout.chunks_exact(p).map(|row| row.iter().sum()).collect();
    let mut dw = vec![0.0; g.c_out * r];
    // dW = dout * cols^T
    gemm(g.c_out, p, r, dout, (p as isize, 1), cols, (1, p as isize), 0.0, &mut dw);
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; r * p];
        // dcols = W^T * dout
        gemm(r, g.c_out, p, wt, (1, r as isize), dout, (p as isize, 1), 0.0, &mut dcols);
        let mut dx = vec![0.0; g.c_in * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}

/// Sampling taps for one axis of a bilinear resize (half-pixel centers).
#[derive(Clone, Debug)]
pub(crate) struct BilinearAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl BilinearAxis {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(s - i0 as f64);
        }
        BilinearAxis { lo, hi, frac }
    }
}

pub(crate) fn bilinear_forward(x: &[f64], c: usize, h: usize, w: usize, ay: &BilinearAxis, ax: &BilinearAxis) -> Vec<f64> {
    let (ho, wo) = (ay.lo.len(), ax.lo.len());
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..wo {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * ho + oy) * wo + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(g: &[f64], c: usize, h: usize, w: usize, ay: &BilinearAxis, ax: &BilinearAxis) -> Vec<f64> {
    let (ho, wo) = (ay.lo.len(), ax.lo.len());
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..wo {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let v = g[(ch * ho + oy) * wo + ox];
                plane[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += v * (1.0 - fy) * fx;
                plane[y1 * w + x0] += v * fy * (1.0 - fx);
                plane[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// Softmax over the middle axis of an `[outer, n, inner]` view, with
/// max-subtraction.
pub(crate) fn softmax_forward(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let m = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                let e = (x[idx(j)] - m).exp();
                y[idx(j)] = e;
                s += e;
            }
            for j in 0..n {
                y[idx(j)] /= s;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(y: &[f64], g: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
            for j in 0..n {
                dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
            }
        }
    }
    dx
}

/// Splits `shape` into `[outer, n, inner]` around `axis`.
pub(crate) fn axis_view(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            "axis",
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Standardization over `groups` contiguous groups; returns (y, mean, inv_std).
pub(crate) fn standardize(x: &[f64], groups: usize, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let size = x.len() / groups;
    let mut y = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(groups);
    let mut inv = Vec::with_capacity(groups);
    for gi in 0..groups {
        let seg = &x[gi * size..(gi + 1) * size];
        let mu = seg.iter().sum::<f64>() / size as f64;
        let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / size as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in y[gi * size..(gi + 1) * size].iter_mut().zip(seg) {
            *o = (v - mu) * is;
        }
        means.push(mu);
        inv.push(is);
    }
    (y, means, inv)
}

pub(crate) fn standardize_backward(y: &[f64], g: &[f64], inv: &[f64]) -> Vec<f64> {
    let groups = inv.len();
    let size = y.len() / groups;
    let mut dx = vec![0.0; y.len()];
    for gi in 0..groups {
        let r = gi * size..(gi + 1) * size;
        let (ys, gs) = (&y[r.clone()], &g[r.clone()]);
        let gm = gs.iter().sum::<f64>() / size as f64;
        let gym = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / size as f64;
        for ((d, &gv), &yv) in dx[r].iter_mut().zip(gs).zip(ys) {
            *d = inv[gi] * (gv - gm - yv * gym);
        }
    }
    dx
}

