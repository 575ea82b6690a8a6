//! A small reverse-mode autodiff tape over NCHW tensors.
//!
//! Every op is evaluated eagerly when it is recorded; `backward` walks the
//! tape in reverse and accumulates gradients for the nodes that need them.
//! The op set is exactly what the generators, discriminators, feature
//! extractor and losses use.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Mat, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Add(Var, Var),
    Lerp {
        lo: Var,
        hi: Var,
        weights: Vec<T>,
    },
    Mask {
        x: Var,
        mask: Vec<T>,
    },
    Upsample2(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Concat(Vec<Var>),
    MeanAbs {
        x: Var,
        target: Tensor<T>,
        weight: Option<Tensor<T>>,
    },
    MeanSqConst(Var, T),
    MeanSqDiff(Var, Tensor<T>),
    Gram(Var),
    WeightedSum(Vec<(Var, T)>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    /// Reused im2col buffer; grown on demand, never shrunk.
    scratch: RefCell<Vec<T>>,
}

pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn trivial(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + j − pad`
/// falls inside the image.
fn valid_range(g: &ConvGeom, j: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(j).div_ceil(g.stride).min(g.wo);
    let hi = if g.w + g.pad > j {
        ((g.w + g.pad - j - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let (lo, hi) = valid_range(g, j);
                let row = ((ci * g.kh + i) * g.kw + j) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * g.stride + j - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (k, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[start + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let (lo, hi) = valid_range(g, j);
                if lo == hi {
                    continue;
                }
                let row = ((ci * g.kh + i) * g.kw + j) * p;
                let src = &cols[row..row + p];
                let start = lo * g.stride + j - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in line[start..start + hi - lo].iter_mut().zip(seg) {
                            *d += v;
                        }
                    } else {
                        for (k, &v) in seg.iter().enumerate() {
                            line[start + k * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: Var, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            scratch: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        if c != ci {
            return Err(Error::shape(format!(
                "conv expects {ci} input channels, got {c}"
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(Error::shape(format!(
                "{h}x{wd} input too small for a {kh}x{kw} kernel"
            )));
        }
        let g = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (k, p) = (g.k(), g.p());
        let mut out = vec![T::zero(); n * o * p];
        {
            let mut scratch = self.scratch.borrow_mut();
            if !g.trivial() && scratch.len() < k * p {
                scratch.resize(k * p, T::zero());
            }
            let cols = &mut scratch[..if g.trivial() { 0 } else { k * p }];
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs = &xv[s * c * h * wd..(s + 1) * c * h * wd];
                let colsref: &[T] = if g.trivial() {
                    xs
                } else {
                    im2col(xs, &g, cols);
                    &*cols
                };
                matmul(
                    Mat::new(wv, o, k),
                    Mat::new(colsref, k, p),
                    &mut out[s * o * p..(s + 1) * o * p],
                    T::zero(),
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                if bv.len() != o {
                    return Err(Error::shape("conv bias length mismatch"));
                }
                for (chunk, &bias) in out.chunks_mut(p).zip(bv.iter().cycle()) {
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, o, g.ho, g.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * hp * wp);
        let cols: Vec<usize> = (0..wp)
            .map(|j| reflect_index(j as isize - pad as isize, w))
            .collect();
        for plane in xv.chunks(h * w) {
            for i in 0..hp {
                let r = reflect_index(i as isize - pad as isize, h);
                let row = &plane[r * w..(r + 1) * w];
                out.extend(cols.iter().map(|&j| row[j]));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, hp, wp], out)?,
            Op::ReflectPad { x, pad },
            rg,
        ))
    }

    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let m = h * w;
        let eps = T::of(1e-5);
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(n * c);
        let mf = T::of(m as f64);
        for plane in out.chunks_mut(m) {
            let mean = plane.iter().copied().sum::<T>() / mf;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let inv = T::one() / (var + eps).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::InstanceNorm { x, inv_std },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * s },
            Op::LeakyRelu(x, s),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Per-sample interpolation `lo + w·(hi − lo)`; a weight of exactly 1
    /// yields `hi` bit-for-bit, so both endpoints are exact.
    pub fn lerp(&mut self, lo: Var, hi: Var, weights: &[f64]) -> Result<Var> {
        let (lv, hv) = (self.value(lo), self.value(hi));
        if lv.shape() != hv.shape() {
            return Err(Error::shape("lerp operands differ in shape"));
        }
        let n = lv.shape()[0];
        if weights.len() != n {
            return Err(Error::shape(format!(
                "{} interpolation weights for a batch of {n}",
                weights.len()
            )));
        }
        let per = lv.numel() / n;
        let weights: Vec<T> = weights.iter().map(|&w| T::of(w)).collect();
        let mut data = Vec::with_capacity(lv.numel());
        for (s, &w) in weights.iter().enumerate() {
            let range = s * per..(s + 1) * per;
            let (l, h) = (&lv.data()[range.clone()], &hv.data()[range]);
            if w == T::one() {
                data.extend_from_slice(h);
            } else {
                data.extend(l.iter().zip(h).map(|(&l, &h)| l + w * (h - l)));
            }
        }
        let value = Tensor::new(lv.shape().to_vec(), data)?;
        let rg = self.rg(lo) || self.rg(hi);
        Ok(self.push(value, Op::Lerp { lo, hi, weights }, rg))
    }

    /// Elementwise product with a constant mask of the same shape.
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::shape("mask length mismatch"));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mask { x, mask }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w * 4);
        for plane in xv.chunks(h * w) {
            for i in 0..2 * h {
                let row = &plane[(i / 2) * w..(i / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, 2 * h, 2 * w], out)?,
            Op::Upsample2(x),
            rg,
        ))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape("max pool on a map smaller than 2x2"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for (pi, plane) in xv.chunks(h * w).enumerate() {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = 2 * i * w + 2 * j;
                    for idx in [2 * i * w + 2 * j + 1, (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1] {
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    out.push(plane[best]);
                    argmax.push((pi * h * w + best) as u32);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, ho, wo], out)?,
            Op::MaxPool2 { x, argmax },
            rg,
        ))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(xs[0]).dims4()?;
        let mut total_c = 0;
        for &x in xs {
            let (n2, c, h2, w2) = self.value(x).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    self.value(x).shape(),
                    self.value(xs[0]).shape()
                )));
            }
            total_c += c;
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for s in 0..n {
            for &x in xs {
                let v = self.value(x);
                let per = v.numel() / n;
                out.extend_from_slice(&v.data()[s * per..(s + 1) * per]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::new(vec![n, total_c, h, w], out)?,
            Op::Concat(xs.to_vec()),
            rg,
        ))
    }

    /// `mean(|x − target| · weight)`, with `weight` defaulting to ones.
    pub fn mean_abs(&mut self, x: Var, target: Tensor<T>, weight: Option<Tensor<T>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() || weight.as_ref().is_some_and(|w| w.shape() != xv.shape()) {
            return Err(Error::shape(format!(
                "L1 operand {:?} vs target {:?}",
                xv.shape(),
                target.shape()
            )));
        }
        let n = T::of(xv.numel() as f64);
        let sum: T = match &weight {
            Some(wt) => xv
                .data()
                .iter()
                .zip(target.data())
                .zip(wt.data())
                .map(|((&a, &b), &w)| (a - b).abs() * w)
                .sum(),
            None => xv
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| (a - b).abs())
                .sum(),
        };
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(sum / n),
            Op::MeanAbs { x, target, weight },
            rg,
        ))
    }

    /// `mean((x − c)²)` against a constant target value.
    pub fn mean_sq_const(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let xv = self.value(x);
        let n = T::of(xv.numel() as f64);
        let sum: T = xv.data().iter().map(|&v| (v - c) * (v - c)).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(sum / n), Op::MeanSqConst(x, c), rg)
    }

    pub fn mean_sq_diff(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::shape("squared-error operands differ in shape"));
        }
        let n = T::of(xv.numel() as f64);
        let sum: T = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(sum / n), Op::MeanSqDiff(x, target), rg))
    }

    /// Per-sample Gram matrix `F·Fᵀ / (C·H·W)`, shape `[N, C, C]`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let p = h * w;
        if p == 0 || c == 0 {
            return Err(Error::arg("Gram matrix of an empty feature map"));
        }
        let norm = T::one() / T::of((c * p) as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * c];
        for s in 0..n {
            let f = &xv[s * c * p..(s + 1) * c * p];
            let g = &mut out[s * c * c..(s + 1) * c * c];
            matmul(Mat::new(f, c, p), Mat::new(f, c, p).t(), g, T::zero());
            g.iter_mut().for_each(|v| *v *= norm);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, c], out)?, Op::Gram(x), rg))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut sum = T::zero();
        let mut typed = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::shape("weighted_sum expects scalar terms"));
            }
            let w = T::of(w);
            sum += self.value(v).item() * w;
            typed.push((v, w));
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(sum), Op::WeightedSum(typed), rg))
    }

    /// Reverse pass from a scalar node. Gradients of leaves are retained
    /// and readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, g, i, &mut grads)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        index: usize,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {
                grads[index] = Some(g);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, c, h, wd) = xt.dims4()?;
                let (o, _, kh, kw) = wt.dims4()?;
                let (_, _, ho, wo) = node.value.dims4()?;
                let geom = ConvGeom {
                    c,
                    h,
                    w: wd,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                    ho,
                    wo,
                };
                let (k, p) = (geom.k(), geom.p());
                let mut scratch = self.scratch.borrow_mut();
                if !geom.trivial() && scratch.len() < k * p {
                    scratch.resize(k * p, T::zero());
                }
                let cols = &mut scratch[..if geom.trivial() { 0 } else { k * p }];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); xt.numel()];
                    for s in 0..n {
                        let dy = &gd[s * o * p..(s + 1) * o * p];
                        let dxs = &mut dx[s * c * h * wd..(s + 1) * c * h * wd];
                        if geom.trivial() {
                            matmul(Mat::new(wt.data(), o, k).t(), Mat::new(dy, o, p), dxs, T::zero());
                        } else {
                            matmul(Mat::new(wt.data(), o, k).t(), Mat::new(dy, o, p), cols, T::zero());
                            col2im_add(cols, &geom, dxs);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); wt.numel()];
                    for s in 0..n {
                        let dy = &gd[s * o * p..(s + 1) * o * p];
                        let xs = &xt.data()[s * c * h * wd..(s + 1) * c * h * wd];
                        let colsref: &[T] = if geom.trivial() {
                            xs
                        } else {
                            im2col(xs, &geom, cols);
                            &*cols
                        };
                        matmul(Mat::new(dy, o, p), Mat::new(colsref, k, p).t(), &mut dw, T::one());
                    }
                    accumulate(grads, *w, Tensor::new(wt.shape().to_vec(), dw)?);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); o];
                    for (chunk, ch) in gd.chunks(p).zip((0..o).cycle()) {
                        db[ch] += chunk.iter().copied().sum::<T>();
                    }
                    accumulate(grads, b, Tensor::new(vec![o], db)?);
                }
            }
            Op::ReflectPad { x, pad } => {
                let xt = self.value(*x);
                let (_, _, h, w) = xt.dims4()?;
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let mut dx = vec![T::zero(); xt.numel()];
                let cols: Vec<usize> = (0..wp)
                    .map(|j| reflect_index(j as isize - *pad as isize, w))
                    .collect();
                for (dplane, gplane) in dx.chunks_mut(h * w).zip(gd.chunks(hp * wp)) {
                    for i in 0..hp {
                        let r = reflect_index(i as isize - *pad as isize, h);
                        for (j, &cj) in cols.iter().enumerate() {
                            dplane[r * w + cj] += gplane[i * wp + j];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, _, h, w) = node.value.dims4()?;
                let m = h * w;
                let mf = T::of(m as f64);
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for (pi, &inv) in inv_std.iter().enumerate() {
                    let r = pi * m..(pi + 1) * m;
                    let (yp, gp) = (&y[r.clone()], &gd[r.clone()]);
                    let sum_g: T = gp.iter().copied().sum();
                    let sum_gy: T = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dx[r].iter_mut().zip(gp).zip(yp) {
                        *d = inv / mf * (mf * gv - sum_g - yv * sum_gy);
                    }
                }
                accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?);
            }
            Op::Relu(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::LeakyRelu(x, s) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { gv * *s })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Tanh(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| gv * (T::one() - y * y))
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Lerp { lo, hi, weights } => {
                let per = g.numel() / weights.len();
                let scaled = |f: &dyn Fn(T) -> T| -> Vec<T> {
                    gd.chunks(per)
                        .zip(weights)
                        .flat_map(|(chunk, &w)| {
                            let k = f(w);
                            chunk.iter().map(move |&v| v * k)
                        })
                        .collect()
                };
                if self.rg(*hi) {
                    let d = scaled(&|w| w);
                    accumulate(grads, *hi, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.rg(*lo) {
                    let d = scaled(&|w| T::one() - w);
                    accumulate(grads, *lo, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Mask { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Upsample2(x) => {
                let xt = self.value(*x);
                let (_, _, h, w) = xt.dims4()?;
                let mut dx = vec![T::zero(); xt.numel()];
                for (dplane, gplane) in dx.chunks_mut(h * w).zip(gd.chunks(4 * h * w)) {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dplane[(i / 2) * w + j / 2] += gplane[i * 2 * w + j];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::MaxPool2 { x, argmax } => {
                let xt = self.value(*x);
                let mut dx = vec![T::zero(); xt.numel()];
                for (&idx, &gv) in argmax.iter().zip(gd) {
                    dx[idx as usize] += gv;
                }
                accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::Concat(xs) => {
                let n = g.shape()[0];
                let per_out = g.numel() / n;
                let mut offset = 0;
                for &x in xs {
                    let xt = self.value(x);
                    let per = xt.numel() / n;
                    if self.rg(x) {
                        let mut dx = Vec::with_capacity(xt.numel());
                        for s in 0..n {
                            let start = s * per_out + offset;
                            dx.extend_from_slice(&gd[start..start + per]);
                        }
                        accumulate(grads, x, Tensor::new(xt.shape().to_vec(), dx)?);
                    }
                    offset += per;
                }
            }
            Op::MeanAbs { x, target, weight } => {
                let xt = self.value(*x);
                let scale = gd[0] / T::of(xt.numel() as f64);
                let sign = |d: T| {
                    if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                let dx: Vec<T> = match weight {
                    Some(wt) => xt
                        .data()
                        .iter()
                        .zip(target.data())
                        .zip(wt.data())
                        .map(|((&a, &b), &w)| sign(a - b) * w * scale)
                        .collect(),
                    None => xt
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &b)| sign(a - b) * scale)
                        .collect(),
                };
                accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::MeanSqConst(x, c) => {
                let xt = self.value(*x);
                let scale = gd[0] * T::of(2.0) / T::of(xt.numel() as f64);
                let dx = xt.data().iter().map(|&v| (v - *c) * scale).collect();
                accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::MeanSqDiff(x, target) => {
                let xt = self.value(*x);
                let scale = gd[0] * T::of(2.0) / T::of(xt.numel() as f64);
                let dx = xt
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| (a - b) * scale)
                    .collect();
                accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::Gram(x) => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4()?;
                let p = h * w;
                let norm = T::one() / T::of((c * p) as f64);
                let mut dx = vec![T::zero(); xt.numel()];
                let mut sym = vec![T::zero(); c * c];
                for s in 0..n {
                    let gs = &gd[s * c * c..(s + 1) * c * c];
                    for i in 0..c {
                        for j in 0..c {
                            sym[i * c + j] = (gs[i * c + j] + gs[j * c + i]) * norm;
                        }
                    }
                    let f = &xt.data()[s * c * p..(s + 1) * c * p];
                    matmul(
                        Mat::new(&sym, c, c),
                        Mat::new(f, c, p),
                        &mut dx[s * c * p..(s + 1) * c * p],
                        T::zero(),
                    );
                }
                accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.rg(v) {
                        accumulate(grads, v, Tensor::scalar(gd[0] * w));
                    }
                }
            }
        }
        Ok(())
    }
}
