//! Minimal reverse-mode differentiation.
//!
//! A [`Tape`] records every forward operation as a node holding its output
//! value. Nodes are appended in evaluation order, so the node list is already
//! topologically sorted and [`Tape::backward`] simply walks it in reverse.
//!
//! Only the operators the detection model needs are provided. Each one
//! validates shapes up front and has a hand-written vector-Jacobian product;
//! `gradcheck` compares every rule against central finite differences.

mod gemm;
pub mod gradcheck;
mod tensor;

pub use tensor::Tensor;

use crate::error::{Error, Result};
use gemm::{gemm, Trans};

/// Floor applied to sigmoid outputs so they never reach an exact zero.
const SIGMOID_FLOOR: f64 = f64::MIN_POSITIVE;

/// Clamping constant for log arguments in [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Default variance offset for [`Tape::standardize`].
pub const STANDARDIZE_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: (1, 1),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv1x1 {
        x: Var,
        w: Var,
        b: Var,
    },
    Sigmoid(Var),
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    PoolPairs {
        x: Var,
        axis: usize,
    },
    Standardize {
        x: Var,
        inv_std: Vec<f64>,
    },
    StandardizeFrames {
        x: Var,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    LinearSoftmax(Var),
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Parameters that the loss
    /// does not depend on get a zero tensor; constants get `None`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Ordered record of forward operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the "backward already ran" flag so gradients may be taken again.
    pub fn reset(&mut self) {
        self.consumed = false;
    }

    /// Places a tensor on the tape. Its `requires_grad` flag decides whether
    /// the gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Places a tensor on the tape as a constant, whatever its flag says.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Number of leaves that track gradients.
    pub fn trainable_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.needs_grad && matches!(n.op, Op::Leaf))
            .count()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; p * r];
        gemm(
            p,
            q,
            r,
            self.data(a),
            Trans::No,
            self.data(b),
            Trans::No,
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![p, r], out)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    /// Per-frame linear map across channels: `out[:, t] = w * x[:, t] + b`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sw[1] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "conv1x1",
                left: sw.to_vec(),
                right: sx.to_vec(),
            });
        }
        if sb != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv1x1 bias",
                left: sb.to_vec(),
                right: vec![sw[0]],
            });
        }
        let (c, k, n) = (sw[0], sw[1], sx[1]);
        let mut out = Vec::with_capacity(c * n);
        for &bias in self.data(b) {
            out.extend(std::iter::repeat_n(bias, n));
        }
        gemm(
            c,
            k,
            n,
            self.data(w),
            Trans::No,
            self.data(x),
            Trans::No,
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![c, n], out)?;
        let g = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Conv1x1 { x, w, b }, g))
    }

    /// Elementwise logistic function, evaluated without overflow for any
    /// finite input.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let g = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid(x), g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let g = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same("add", a, b, |x, y| x + y)?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same("mul", a, b, |x, y| x * y)?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let g = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, factor), g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), g)
    }

    /// Mean over one axis; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::InvalidShape {
                op: "mean_axis",
                msg: format!("cannot average axis {axis} of shape {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::MeanAxis { x, axis }, g))
    }

    /// Averages adjacent pairs along `axis`, halving it. An odd trailing
    /// element is dropped; an axis of extent 1 is passed through.
    pub fn pool_pairs(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::InvalidShape {
                op: "pool_pairs",
                msg: format!("cannot pool axis {axis} of shape {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let out_len = (len / 2).max(1);
        let src = self.data(x);
        let mut out = vec![0.0; outer * out_len * inner];
        for o in 0..outer {
            for p in 0..out_len {
                let dst = &mut out[(o * out_len + p) * inner..][..inner];
                if len == 1 {
                    dst.copy_from_slice(&src[o * inner..][..inner]);
                    continue;
                }
                let a = &src[(o * len + 2 * p) * inner..][..inner];
                let b = &src[(o * len + 2 * p + 1) * inner..][..inner];
                for ((d, x), y) in dst.iter_mut().zip(a).zip(b) {
                    *d = 0.5 * (x + y);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = out_len;
        let value = Tensor::new(out_shape, out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::PoolPairs { x, axis }, g))
    }

    /// Standardizes each slice along the first axis: `(x - mean) / sqrt(var + eps)`
    /// with the population variance taken over all remaining axes.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] == 0 || shape[1..].iter().product::<usize>() == 0 {
            return Err(Error::InvalidShape {
                op: "standardize",
                msg: format!("shape {shape:?} has no rows to standardize"),
            });
        }
        let rows = shape[0];
        let cols = shape[1..].iter().product::<usize>();
        let src = self.data(x);
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(shape, out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::Standardize { x, inv_std }, g))
    }

    /// Standardizes every position of the last axis over all other axes:
    /// for `[c, f, n]`, each frame's `c * f` values get mean 0 and variance 1.
    /// Unlike [`standardize`](Self::standardize), no information moves
    /// between frames.
    pub fn standardize_frames(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let frames = shape.last().copied().unwrap_or(0);
        let group = shape[..shape.len().saturating_sub(1)].iter().product::<usize>();
        if shape.len() < 2 || frames == 0 || group == 0 {
            return Err(Error::InvalidShape {
                op: "standardize_frames",
                msg: format!("shape {shape:?} has no frames to standardize"),
            });
        }
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(frames);
        let mut col = vec![0.0; group];
        for t in 0..frames {
            for (i, v) in col.iter_mut().enumerate() {
                *v = src[i * frames + t];
            }
            let (mean, var) = mean_var(&col);
            let inv = 1.0 / (var + eps).sqrt();
            for (i, &v) in col.iter().enumerate() {
                out[i * frames + t] = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(shape, out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::StandardizeFrames { x, inv_std }, g))
    }

    /// 2-D convolution of `x: [cin, h, w]` with `w: [cout, cin, kh, kw]` and
    /// bias `b: [cout]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        if sb != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: sb.to_vec(),
                right: vec![sw[0]],
            });
        }
        let (sh, sww) = spec.stride;
        if sh == 0 || sww == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ph, pw) = spec.padding;
        if h + 2 * ph < kh || wd + 2 * pw < kw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            });
        }
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (wd + 2 * pw - kw) / sww + 1;
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            spec,
        };
        let cols = im2col(self.data(x), &geom);
        let mut out = Vec::with_capacity(cout * ho * wo);
        for &bias in self.data(b) {
            out.extend(std::iter::repeat_n(bias, ho * wo));
        }
        gemm(
            cout,
            cin * kh * kw,
            ho * wo,
            self.data(w),
            Trans::No,
            &cols,
            Trans::No,
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        let g = self.any_grad(&[x, w, b]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            g,
        ))
    }

    /// Linear-softmax pooling over the last axis of `[k, n]`:
    /// `s = sum(m^2) / sum(m)`.
    pub fn linear_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(Error::InvalidShape {
                op: "linear_softmax",
                msg: format!("expected [k, n] with n >= 1, got {shape:?}"),
            });
        }
        let n = shape[1];
        let out = self
            .data(x)
            .chunks(n)
            .map(|row| {
                let s1: f64 = row.iter().sum();
                let s2: f64 = row.iter().map(|v| v * v).sum();
                if s1 > 0.0 {
                    s2 / s1
                } else {
                    0.0
                }
            })
            .collect();
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::vector(out), Op::LinearSoftmax(x), g))
    }

    /// Binary cross-entropy averaged over classes. Log arguments (`p` and
    /// `1 - p`) are floored at `BCE_EPS`.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                left: self.shape(pred).to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let k = target.len();
        if k == 0 {
            return Err(Error::InvalidShape {
                op: "bce",
                msg: "empty prediction".into(),
            });
        }
        let loss = bce_value(self.data(pred), target.data());
        let g = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
            g,
        ))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.shape(loss);
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (p, q) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let r = self.shape(*b)[1];
                    if self.nodes[a.0].needs_grad {
                        let ga = acc(&mut grads, *a, p * q);
                        gemm(p, r, q, &g, Trans::No, self.data(*b), Trans::Yes, 1.0, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = acc(&mut grads, *b, q * r);
                        gemm(q, p, r, self.data(*a), Trans::Yes, &g, Trans::No, 1.0, gb);
                    }
                }
                Op::Conv1x1 { x, w, b } => {
                    let (c, k) = (self.shape(*w)[0], self.shape(*w)[1]);
                    let n = self.shape(*x)[1];
                    if self.nodes[x.0].needs_grad {
                        let gx = acc(&mut grads, *x, k * n);
                        gemm(k, c, n, self.data(*w), Trans::Yes, &g, Trans::No, 1.0, gx);
                    }
                    if self.nodes[w.0].needs_grad {
                        let gw = acc(&mut grads, *w, c * k);
                        gemm(c, n, k, &g, Trans::No, self.data(*x), Trans::Yes, 1.0, gw);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = acc(&mut grads, *b, c);
                        for (dst, row) in gb.iter_mut().zip(g.chunks(n)) {
                            *dst += row.iter().sum::<f64>();
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let gx = acc(&mut grads, *x, y.len());
                    for ((d, &gy), &s) in gx.iter_mut().zip(&g).zip(y) {
                        *d += gy * s * (1.0 - s);
                    }
                }
                Op::Relu(x) => {
                    let xs = self.data(*x);
                    let gx = acc(&mut grads, *x, xs.len());
                    for ((d, &gy), &v) in gx.iter_mut().zip(&g).zip(xs) {
                        if v > 0.0 {
                            *d += gy;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.nodes[v.0].needs_grad {
                            let gv = acc(&mut grads, v, g.len());
                            gv.iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        if self.nodes[v.0].needs_grad {
                            let o = self.data(other);
                            let gv = acc(&mut grads, v, g.len());
                            for ((d, &gy), &ov) in gv.iter_mut().zip(&g).zip(o) {
                                *d += gy * ov;
                            }
                        }
                    }
                }
                Op::Scale(x, factor) => {
                    let gx = acc(&mut grads, *x, g.len());
                    gx.iter_mut().zip(&g).for_each(|(d, s)| *d += s * factor);
                }
                Op::Sum(x) => {
                    let n = self.data(*x).len();
                    let gx = acc(&mut grads, *x, n);
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::MeanAxis { x, axis } => {
                    let shape = self.shape(*x);
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let inv = 1.0 / len as f64;
                    let gx = acc(&mut grads, *x, outer * len * inner);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            let dst = &mut gx[(o * len + a) * inner..][..inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * inv);
                        }
                    }
                }
                Op::PoolPairs { x, axis } => {
                    let shape = self.shape(*x);
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let out_len = (len / 2).max(1);
                    let gx = acc(&mut grads, *x, outer * len * inner);
                    for o in 0..outer {
                        for p in 0..out_len {
                            let src = &g[(o * out_len + p) * inner..][..inner];
                            if len == 1 {
                                let dst = &mut gx[o * inner..][..inner];
                                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                                continue;
                            }
                            for off in 0..2 {
                                let dst = &mut gx[(o * len + 2 * p + off) * inner..][..inner];
                                dst.iter_mut().zip(src).for_each(|(d, s)| *d += 0.5 * s);
                            }
                        }
                    }
                }
                Op::Standardize { x, inv_std } => {
                    let y = node.value.data();
                    let rows = inv_std.len();
                    let cols = y.len() / rows;
                    let gx = acc(&mut grads, *x, y.len());
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean_g = gr.iter().sum::<f64>() / cols as f64;
                        let mean_gy =
                            gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *d += inv_std[r] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
                Op::StandardizeFrames { x, inv_std } => {
                    let y = node.value.data();
                    let frames = inv_std.len();
                    let group = y.len() / frames;
                    let gx = acc(&mut grads, *x, y.len());
                    for (t, &inv) in inv_std.iter().enumerate() {
                        let idx = (0..group).map(|i| i * frames + t);
                        let mean_g = idx.clone().map(|j| g[j]).sum::<f64>() / group as f64;
                        let mean_gy = idx.clone().map(|j| g[j] * y[j]).sum::<f64>() / group as f64;
                        for j in idx {
                            gx[j] += inv * (g[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let cout = self.shape(*w)[0];
                    let patch = geom.cin * geom.kh * geom.kw;
                    let npos = geom.ho * geom.wo;
                    if self.nodes[w.0].needs_grad {
                        let gw = acc(&mut grads, *w, cout * patch);
                        gemm(cout, npos, patch, &g, Trans::No, cols, Trans::Yes, 1.0, gw);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = acc(&mut grads, *b, cout);
                        for (dst, row) in gb.iter_mut().zip(g.chunks(npos)) {
                            *dst += row.iter().sum::<f64>();
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut gcols = vec![0.0; patch * npos];
                        gemm(
                            patch,
                            cout,
                            npos,
                            self.data(*w),
                            Trans::Yes,
                            &g,
                            Trans::No,
                            0.0,
                            &mut gcols,
                        );
                        let gx = acc(&mut grads, *x, geom.cin * geom.h * geom.w);
                        col2im(&gcols, geom, gx);
                    }
                }
                Op::LinearSoftmax(x) => {
                    let xs = self.data(*x);
                    let n = self.shape(*x)[1];
                    let s = node.value.data();
                    let gx = acc(&mut grads, *x, xs.len());
                    for (i, row) in xs.chunks(n).enumerate() {
                        let s1: f64 = row.iter().sum();
                        if s1 <= 0.0 {
                            continue;
                        }
                        let dst = &mut gx[i * n..(i + 1) * n];
                        for (d, &m) in dst.iter_mut().zip(row) {
                            *d += g[i] * (2.0 * m - s[i]) / s1;
                        }
                    }
                }
                Op::Bce { pred, target } => {
                    let p = self.data(*pred);
                    let k = p.len() as f64;
                    let gp = acc(&mut grads, *pred, p.len());
                    for ((d, &pv), &t) in gp.iter_mut().zip(p).zip(target) {
                        let mut dp = 0.0;
                        if pv > BCE_EPS {
                            dp -= t / pv;
                        }
                        if 1.0 - pv > BCE_EPS {
                            dp += (1.0 - t) / (1.0 - pv);
                        }
                        *d += g[0] * dp / k;
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                let is_param = matches!(node.op, Op::Leaf) && node.value.requires_grad();
                if !is_param {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::new(shape, data).expect("gradient matches leaf shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Logistic function that never overflows and never returns an exact zero.
pub fn stable_sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.max(SIGMOID_FLOOR)
}

/// Class-averaged binary cross-entropy with clamped log arguments.
pub fn bce_value(pred: &[f64], target: &[f64]) -> f64 {
    let k = pred.len() as f64;
    -pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            t * p.max(BCE_EPS).ln() + (1.0 - t) * (1.0 - p).max(BCE_EPS).ln()
        })
        .sum::<f64>()
        / k
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npos = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.kh * g.kw * npos];
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * npos;
                for oi in 0..g.ho {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    let dst = &mut cols[row + oi * g.wo..][..g.wo];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * sw + kj) as isize - pw as isize;
                        if jj >= 0 && jj < g.w as isize {
                            *d = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let npos = g.ho * g.wo;
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * npos;
                for oi in 0..g.ho {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut gx[(c * g.h + ii as usize) * g.w..][..g.w];
                    let src = &cols[row + oi * g.wo..][..g.wo];
                    for (oj, &s) in src.iter().enumerate() {
                        let jj = (oj * sw + kj) as isize - pw as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
