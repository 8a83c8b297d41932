//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation at call time together with whatever the
//! adjoint needs. [`Graph::backward`] consumes the tape, so a graph is used for
//! exactly one forward/backward pass.

use std::cell::{Ref, RefCell};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvDims};
use crate::patch::{self, PatchGeometry};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased per-channel variance, used for the running estimate.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { x: Var },
    Sigmoid { x: Var },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, ta: bool, tb: bool },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    ChannelScale { x: Var, s: Var },
    Stack { parts: Vec<Var> },
    Select { x: Var, index: usize, count: usize },
    Mean { x: Var },
    Sum { x: Var },
    Unfold { x: Var, geom: PatchGeometry },
    Fold { p: Var, geom: PatchGeometry },
    PadReflect { x: Var, bottom: usize, right: usize },
    Crop { x: Var, h: usize, w: usize },
    Reshape { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The recording tape.
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf: gradients are collected for it.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: no gradient is propagated into it.
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = self.needs(parents);
        self.push(value, op, rg)
    }

    // ---------------------------------------------------------------- ops

    /// Zero-padded cross-correlation of N×Cin×H×W with Cout×Cin×k×k.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (dims, out) = {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            let (n, c_in, h, wd) = xv.dims4()?;
            let (c_out, wc, kh, kw) = wv.dims4()?;
            if kh != kw {
                return Err(Error::Config(format!("non-square kernel {kh}×{kw}")));
            }
            if kh % 2 == 0 {
                return Err(Error::Config(format!("kernel size {kh} must be odd")));
            }
            if wc != c_in {
                return Err(shape_err!("conv input has {c_in} channels, weight expects {wc}"));
            }
            if bv.numel() != c_out {
                return Err(shape_err!("conv bias length {} != {c_out}", bv.numel()));
            }
            if h + 2 * pad < kh || wd + 2 * pad < kh {
                return Err(shape_err!("input {h}×{wd} smaller than kernel {kh} with pad {pad}"));
            }
            let dims = ConvDims { batch: n, c_in, c_out, h, w: wd, k: kh, pad };
            let out = kernels::conv2d_forward(xv.data(), wv.data(), bv.data(), &dims);
            (dims, Tensor::new(&[n, c_out, dims.out_h(), dims.out_w()], out)?)
        };
        Ok(self.record(out, Op::Conv2d { x, w, b, dims }, &[x, w, b]))
    }

    /// Training-mode batch norm: normalizes with the batch statistics over N×H×W.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("batch norm eps must be positive, got {eps}")));
        }
        let (out, xhat, inv_std, stats) = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            check_len(&self.value(gamma), c, "gamma")?;
            check_len(&self.value(beta), c, "beta")?;
            let count = n * h * w;
            if count < 2 {
                return Err(Error::DegenerateStatistics(format!(
                    "batch norm needs at least two values per channel in train mode, got {count}"
                )));
            }
            let g = self.value(gamma);
            let bt = self.value(beta);
            let hw = h * w;
            let mut mean = vec![T::zero(); c];
            let mut inv_std = vec![T::zero(); c];
            let mut unbiased = vec![T::zero(); c];
            for ci in 0..c {
                let mut s = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    s += xv.data()[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / count as f64;
                let mut ss = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    ss += xv.data()[base..base + hw].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                }
                let var = ss / count as f64;
                mean[ci] = T::lit(mu);
                inv_std[ci] = T::lit(1.0 / (var + eps).sqrt());
                unbiased[ci] = T::lit(ss / (count - 1) as f64);
            }
            let mut xhat = vec![T::zero(); xv.numel()];
            let mut out = vec![T::zero(); xv.numel()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in base..base + hw {
                        let xh = (xv.data()[i] - mean[ci]) * inv_std[ci];
                        xhat[i] = xh;
                        out[i] = g.data()[ci] * xh + bt.data()[ci];
                    }
                }
            }
            let out = Tensor::new(xv.shape(), out)?;
            (out, xhat, inv_std, BatchStats { mean, var: unbiased })
        };
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: true };
        let v = self.record(out, op, &[x, gamma, beta]);
        Ok((v, stats))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_infer(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("batch norm eps must be positive, got {eps}")));
        }
        let (out, xhat, inv_std) = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            check_len(&self.value(gamma), c, "gamma")?;
            check_len(&self.value(beta), c, "beta")?;
            check_len(running_mean, c, "running_mean")?;
            check_len(running_var, c, "running_var")?;
            let g = self.value(gamma);
            let bt = self.value(beta);
            let inv_std: Vec<T> =
                running_var.data().iter().map(|v| T::lit(1.0 / (v.as_f64() + eps).sqrt())).collect();
            let hw = h * w;
            let mut xhat = vec![T::zero(); xv.numel()];
            let mut out = vec![T::zero(); xv.numel()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let mu = running_mean.data()[ci];
                    for i in base..base + hw {
                        let xh = (xv.data()[i] - mu) * inv_std[ci];
                        xhat[i] = xh;
                        out[i] = g.data()[ci] * xh + bt.data()[ci];
                    }
                }
            }
            (Tensor::new(xv.shape(), out)?, xhat, inv_std)
        };
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: false };
        Ok(self.record(out, op, &[x, gamma, beta]))
    }

    pub fn activate(&self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.record(out, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.record(out, Op::Sigmoid { x }, &[x])
    }

    /// Plain m×k · k×n product.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul inner dimensions {k} and {k2} differ"));
        }
        let out = kernels::bmm(self.value(a).data(), self.value(b).data(), 1, m, k, n, false, false);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.record(out, Op::Bmm { a, b, batch: 1, m, k, n, ta: false, tb: false }, &[a, b]))
    }

    /// Batched product over rank-3 operands, each optionally transposed.
    pub fn bmm(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (&[ba, a0, a1], &[bb, b0, b1]) = (&sa[..], &sb[..]) else {
            return Err(shape_err!("bmm expects rank-3 operands, got {sa:?} and {sb:?}"));
        };
        if ba != bb {
            return Err(shape_err!("bmm batch sizes {ba} and {bb} differ"));
        }
        let (m, k) = if ta { (a1, a0) } else { (a0, a1) };
        let (k2, n) = if tb { (b1, b0) } else { (b0, b1) };
        if k != k2 {
            return Err(shape_err!("bmm inner dimensions {k} and {k2} differ"));
        }
        let out = kernels::bmm(self.value(a).data(), self.value(b).data(), ba, m, k, n, ta, tb);
        let out = Tensor::new(&[ba, m, n], out)?;
        Ok(self.record(out, Op::Bmm { a, b, batch: ba, m, k, n, ta, tb }, &[a, b]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {axis} out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = {
            let xv = self.value(x);
            let mut out = vec![T::zero(); xv.numel()];
            softmax_slices(xv.data(), &mut out, outer, len, inner);
            Tensor::new(&shape, out)?
        };
        Ok(self.record(out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Spatial mean: N×C×H×W → N×C.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            let hw = h * w;
            let data = xv
                .data()
                .chunks(hw)
                .map(|plane| T::lit(plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
                .collect();
            Tensor::new(&[n, c], data)?
        };
        Ok(self.record(out, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Affine map `x·Wᵀ + b` on N×Din inputs.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            let (n, din) = xv.dims2()?;
            let (dout, wdin) = wv.dims2()?;
            if din != wdin {
                return Err(shape_err!("linear input width {din} != weight width {wdin}"));
            }
            check_len(&bv, dout, "linear bias")?;
            let mut out = kernels::bmm(xv.data(), wv.data(), 1, n, din, dout, false, true);
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o += b);
            }
            Tensor::new(&[n, dout], out)?
        };
        Ok(self.record(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        Ok(self.record(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y)?;
        Ok(self.record(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y)?;
        Ok(self.record(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.record(out, Op::Scale { x, factor }, &[x])
    }

    /// Multiply every H×W plane of N×C×H×W by the matching entry of N×C.
    pub fn channel_scale(&self, x: Var, s: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let sv = self.value(s);
            let (n, c, h, w) = xv.dims4()?;
            if sv.shape() != [n, c] {
                return Err(shape_err!("channel scale {:?} does not match {n}×{c}", sv.shape()));
            }
            let hw = h * w;
            let mut out = xv.data().to_vec();
            for (plane, &f) in out.chunks_mut(hw).zip(sv.data()) {
                plane.iter_mut().for_each(|v| *v *= f);
            }
            Tensor::new(xv.shape(), out)?
        };
        Ok(self.record(out, Op::ChannelScale { x, s }, &[x, s]))
    }

    /// Stack equally shaped N×D tensors into N×K×D.
    pub fn stack(&self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("stack of nothing"))?;
        let (n, d) = self.value(*first).dims2()?;
        let k = parts.len();
        let mut out = vec![T::zero(); n * k * d];
        for (j, p) in parts.iter().enumerate() {
            let pv = self.value(*p);
            if pv.shape() != [n, d] {
                return Err(shape_err!("stack part {:?} != {n}×{d}", pv.shape()));
            }
            for i in 0..n {
                out[(i * k + j) * d..(i * k + j + 1) * d].copy_from_slice(&pv.data()[i * d..(i + 1) * d]);
            }
        }
        let out = Tensor::new(&[n, k, d], out)?;
        Ok(self.record(out, Op::Stack { parts: parts.to_vec() }, parts))
    }

    /// Take slice `index` of the middle axis of N×K×D, giving N×D.
    pub fn select(&self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x);
        let &[n, k, d] = &shape[..] else {
            return Err(shape_err!("select expects rank 3, got {shape:?}"));
        };
        if index >= k {
            return Err(shape_err!("select index {index} out of range {k}"));
        }
        let out = {
            let xv = self.value(x);
            let mut out = Vec::with_capacity(n * d);
            for i in 0..n {
                out.extend_from_slice(&xv.data()[(i * k + index) * d..(i * k + index + 1) * d]);
            }
            Tensor::new(&[n, d], out)?
        };
        Ok(self.record(out, Op::Select { x, index, count: k }, &[x]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let m = self.value(x).mean();
        self.record(Tensor::scalar(T::lit(m)), Op::Mean { x }, &[x])
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(Tensor::scalar(T::lit(s)), Op::Sum { x }, &[x])
    }

    /// N×C×H×W → N×P×D patch rows.
    pub fn unfold(&self, x: Var, geom: PatchGeometry) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            geom.check_image(c, h, w)?;
            let per = c * h * w;
            let rows = geom.num_patches() * geom.patch_len();
            let mut out = vec![T::zero(); n * rows];
            let src = xv.data();
            crate::exec::for_each_chunk(&mut out, rows, |i, dst| {
                patch::unfold_into(&src[i * per..(i + 1) * per], &geom, dst)
            });
            Tensor::new(&[n, geom.num_patches(), geom.patch_len()], out)?
        };
        Ok(self.record(out, Op::Unfold { x, geom }, &[x]))
    }

    /// N×P×D patch rows → N×C×H×W with overlap averaging.
    pub fn fold(&self, p: Var, geom: PatchGeometry) -> Result<Var> {
        let out = {
            let pv = self.value(p);
            let shape = pv.shape();
            if shape.len() != 3 || shape[1] != geom.num_patches() || shape[2] != geom.patch_len() {
                return Err(shape_err!("fold input {shape:?} does not match geometry {geom:?}"));
            }
            let n = shape[0];
            let rows = geom.num_patches() * geom.patch_len();
            let per = geom.channels * geom.height * geom.width;
            let mut out = vec![T::zero(); n * per];
            let src = pv.data();
            crate::exec::for_each_chunk(&mut out, per, |i, dst| {
                patch::fold_mean_into(&src[i * rows..(i + 1) * rows], &geom, dst)
            });
            Tensor::new(&[n, geom.channels, geom.height, geom.width], out)?
        };
        Ok(self.record(out, Op::Fold { p, geom }, &[p]))
    }

    /// Reflect-pad the bottom and right edges of N×C×H×W.
    pub fn pad_reflect(&self, x: Var, bottom: usize, right: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            if bottom >= h.max(2) || right >= w.max(2) || (bottom > 0 && h < 2) || (right > 0 && w < 2) {
                return Err(shape_err!("reflect pad ({bottom},{right}) too large for {h}×{w}"));
            }
            let (ho, wo) = (h + bottom, w + right);
            let mut out = vec![T::zero(); n * c * ho * wo];
            for plane in 0..n * c {
                for oh in 0..ho {
                    let ih = reflect(oh, h);
                    for ow in 0..wo {
                        out[(plane * ho + oh) * wo + ow] = xv.data()[(plane * h + ih) * w + reflect(ow, w)];
                    }
                }
            }
            Tensor::new(&[n, c, ho, wo], out)?
        };
        Ok(self.record(out, Op::PadReflect { x, bottom, right }, &[x]))
    }

    /// Keep the top-left `h`×`w` window of N×C×H×W.
    pub fn crop(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, c, hi, wi) = xv.dims4()?;
            if h > hi || w > wi || h == 0 || w == 0 {
                return Err(shape_err!("crop {h}×{w} out of range for {hi}×{wi}"));
            }
            let mut out = Vec::with_capacity(n * c * h * w);
            for plane in 0..n * c {
                for r in 0..h {
                    let base = (plane * hi + r) * wi;
                    out.extend_from_slice(&xv.data()[base..base + w]);
                }
            }
            Tensor::new(&[n, c, h, w], out)?
        };
        Ok(self.record(out, Op::Crop { x, h, w }, &[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(out, Op::Reshape { x }, &[x]))
    }

    // ----------------------------------------------------------- backward

    /// Propagate d`loss`/d· through the tape. `loss` must hold a single value.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.into_inner();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn check_len<T: Real>(t: &Tensor<T>, want: usize, what: &str) -> Result<()> {
    if t.numel() != want {
        return Err(shape_err!("{what} has {} entries, expected {want}", t.numel()));
    }
    Ok(())
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

/// Replace a subnormal value by zero.
#[inline]
fn flush<T: Real>(v: T) -> T {
    if v.abs() < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

pub(crate) fn softmax_slices<T: Real>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[idx(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - mx).exp();
                out[idx(j)] = e;
                total += e;
            }
            // Probabilities below ε² are far under the rounding error of the row's
            // dominant terms; dropping them keeps later products out of the
            // subnormal range, where arithmetic is orders of magnitude slower.
            let cutoff = T::epsilon() * T::epsilon();
            for j in 0..len {
                let p = out[idx(j)] / total;
                out[idx(j)] = if p < cutoff { T::zero() } else { p };
            }
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
    let rg = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, dims } => {
            let cg = kernels::conv2d_backward(val(*x).data(), val(*w).data(), g, dims, rg(*x));
            if let Some(dx) = cg.dx {
                acc(grads, *x, dx);
            }
            if rg(*w) {
                acc(grads, *w, cg.dw);
            }
            if rg(*b) {
                acc(grads, *b, cg.db);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
            let (n, c, h, w) = val(*x).dims4()?;
            let hw = h * w;
            let count = (n * hw) as f64;
            let gm = val(*gamma).data();
            let mut sum_g = vec![0.0f64; c];
            let mut sum_gx = vec![0.0f64; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in base..base + hw {
                        sum_g[ci] += g[i].as_f64();
                        sum_gx[ci] += (g[i] * xhat[i]).as_f64();
                    }
                }
            }
            if rg(*gamma) {
                acc(grads, *gamma, sum_gx.iter().map(|&v| T::lit(v)).collect());
            }
            if rg(*beta) {
                acc(grads, *beta, sum_g.iter().map(|&v| T::lit(v)).collect());
            }
            if rg(*x) {
                let mut dx = vec![T::zero(); g.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let k = gm[ci] * inv_std[ci];
                        for i in base..base + hw {
                            dx[i] = if *batch_stats {
                                let mg = T::lit(sum_g[ci] / count);
                                let mgx = T::lit(sum_gx[ci] / count);
                                k * (g[i] - mg - xhat[i] * mgx)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                acc(grads, *x, dx);
            }
        }
        Op::Relu { x } => {
            if rg(*x) {
                let dx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                acc(grads, *x, dx);
            }
        }
        Op::Sigmoid { x } => {
            if rg(*x) {
                let y = nodes[id].value.data();
                let dx = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
                acc(grads, *x, dx);
            }
        }
        Op::Bmm { a, b, batch, m, k, n, ta, tb } => {
            let (batch, m, k, n, ta, tb) = (*batch, *m, *k, *n, *ta, *tb);
            if rg(*a) {
                let da = if !ta {
                    kernels::bmm(g, val(*b).data(), batch, m, n, k, false, !tb)
                } else {
                    kernels::bmm(val(*b).data(), g, batch, k, n, m, tb, true)
                };
                acc(grads, *a, da);
            }
            if rg(*b) {
                let db = if !tb {
                    kernels::bmm(val(*a).data(), g, batch, k, m, n, !ta, false)
                } else {
                    kernels::bmm(g, val(*a).data(), batch, n, m, k, true, ta)
                };
                acc(grads, *b, db);
            }
        }
        Op::Softmax { x, outer, len, inner } => {
            if rg(*x) {
                let y = nodes[id].value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*len {
                            dx[idx(j)] = flush(y[idx(j)] * (g[idx(j)] - dot));
                        }
                    }
                }
                acc(grads, *x, dx);
            }
        }
        Op::GlobalAvgPool { x } => {
            if rg(*x) {
                let (_, _, h, w) = val(*x).dims4()?;
                let hw = h * w;
                let inv = T::lit(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(val(*x).numel());
                for &gi in g {
                    dx.extend(std::iter::repeat(gi * inv).take(hw));
                }
                acc(grads, *x, dx);
            }
        }
        Op::Linear { x, w, b } => {
            let (n, din) = val(*x).dims2()?;
            let (dout, _) = val(*w).dims2()?;
            if rg(*x) {
                acc(grads, *x, kernels::bmm(g, val(*w).data(), 1, n, dout, din, false, false));
            }
            if rg(*w) {
                acc(grads, *w, kernels::bmm(g, val(*x).data(), 1, dout, n, din, true, false));
            }
            if rg(*b) {
                let mut db = vec![T::zero(); dout];
                for row in g.chunks(dout) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                acc(grads, *b, db);
            }
        }
        Op::Add { a, b } => {
            if rg(*a) {
                acc(grads, *a, g.to_vec());
            }
            if rg(*b) {
                acc(grads, *b, g.to_vec());
            }
        }
        Op::Sub { a, b } => {
            if rg(*a) {
                acc(grads, *a, g.to_vec());
            }
            if rg(*b) {
                acc(grads, *b, g.iter().map(|&v| -v).collect());
            }
        }
        Op::Mul { a, b } => {
            if rg(*a) {
                acc(grads, *a, g.iter().zip(val(*b).data()).map(|(&gi, &bi)| gi * bi).collect());
            }
            if rg(*b) {
                acc(grads, *b, g.iter().zip(val(*a).data()).map(|(&gi, &ai)| gi * ai).collect());
            }
        }
        Op::Scale { x, factor } => {
            if rg(*x) {
                acc(grads, *x, g.iter().map(|&v| v * *factor).collect());
            }
        }
        Op::ChannelScale { x, s } => {
            let (_, _, h, w) = val(*x).dims4()?;
            let hw = h * w;
            if rg(*x) {
                let mut dx = g.to_vec();
                for (plane, &f) in dx.chunks_mut(hw).zip(val(*s).data()) {
                    plane.iter_mut().for_each(|v| *v *= f);
                }
                acc(grads, *x, dx);
            }
            if rg(*s) {
                let ds = g
                    .chunks(hw)
                    .zip(val(*x).data().chunks(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                    .collect();
                acc(grads, *s, ds);
            }
        }
        Op::Stack { parts } => {
            let k = parts.len();
            let (n, d) = val(parts[0]).dims2()?;
            for (j, p) in parts.iter().enumerate() {
                if rg(*p) {
                    let mut dp = Vec::with_capacity(n * d);
                    for i in 0..n {
                        dp.extend_from_slice(&g[(i * k + j) * d..(i * k + j + 1) * d]);
                    }
                    acc(grads, *p, dp);
                }
            }
        }
        Op::Select { x, index, count } => {
            if rg(*x) {
                let (n, d) = (val(*x).shape()[0], val(*x).shape()[2]);
                let mut dx = vec![T::zero(); val(*x).numel()];
                for i in 0..n {
                    dx[(i * count + index) * d..(i * count + index + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
                }
                acc(grads, *x, dx);
            }
        }
        Op::Mean { x } => {
            if rg(*x) {
                let n = val(*x).numel();
                acc(grads, *x, vec![g[0] * T::lit(1.0 / n as f64); n]);
            }
        }
        Op::Sum { x } => {
            if rg(*x) {
                acc(grads, *x, vec![g[0]; val(*x).numel()]);
            }
        }
        Op::Unfold { x, geom } => {
            if rg(*x) {
                let rows = geom.num_patches() * geom.patch_len();
                let per = geom.channels * geom.height * geom.width;
                let n = g.len() / rows;
                let mut dx = vec![T::zero(); n * per];
                crate::exec::for_each_chunk(&mut dx, per, |i, dst| {
                    patch::fold_sum_into(&g[i * rows..(i + 1) * rows], geom, dst)
                });
                acc(grads, *x, dx);
            }
        }
        Op::Fold { p, geom } => {
            if rg(*p) {
                let rows = geom.num_patches() * geom.patch_len();
                let per = geom.channels * geom.height * geom.width;
                let n = g.len() / per;
                let counts = geom.coverage_counts();
                let mut dp = vec![T::zero(); n * rows];
                crate::exec::for_each_chunk(&mut dp, rows, |i, dst| {
                    let scaled: Vec<T> = g[i * per..(i + 1) * per]
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| {
                            let c = counts[j % (geom.height * geom.width)];
                            if c == 0 {
                                T::zero()
                            } else {
                                v / T::lit(c as f64)
                            }
                        })
                        .collect();
                    patch::unfold_into(&scaled, geom, dst)
                });
                acc(grads, *p, dp);
            }
        }
        Op::PadReflect { x, bottom, right } => {
            if rg(*x) {
                let (n, c, h, w) = val(*x).dims4()?;
                let (ho, wo) = (h + bottom, w + right);
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for oh in 0..ho {
                        let ih = reflect(oh, h);
                        for ow in 0..wo {
                            dx[(plane * h + ih) * w + reflect(ow, w)] += g[(plane * ho + oh) * wo + ow];
                        }
                    }
                }
                acc(grads, *x, dx);
            }
        }
        Op::Crop { x, h, w } => {
            if rg(*x) {
                let (n, c, hi, wi) = val(*x).dims4()?;
                let mut dx = vec![T::zero(); n * c * hi * wi];
                for plane in 0..n * c {
                    for r in 0..*h {
                        let dst = (plane * hi + r) * wi;
                        let src = (plane * h + r) * w;
                        dx[dst..dst + w].copy_from_slice(&g[src..src + w]);
                    }
                }
                acc(grads, *x, dx);
            }
        }
        Op::Reshape { x } => {
            if rg(*x) {
                acc(grads, *x, g.to_vec());
            }
        }
    }
    Ok(())
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(&self.shapes[v.0], g.clone()).ok()
    }

    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn conv_of_ones_counts_the_window() {
        let g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.param(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_identity_zero_weights_and_bad_kernels() {
        let g = Graph::new();
        let data = Tensor::from_fn(&[2, 1, 3, 4], |i| i as f64 * 0.7 - 3.0);
        let x = g.input(data.clone());
        let one = g.param(t(&[1, 1, 1, 1], &[1.0]));
        let zb = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, one, zb, 0).unwrap();
        assert_eq!(*g.value(y), data);

        let zw = g.param(Tensor::zeros(&[1, 1, 3, 3]));
        let b = g.param(t(&[1], &[1.25]));
        let y = g.conv2d(x, zw, b, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 1.25));

        let even = g.param(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(g.conv2d(x, even, zb, 0), Err(Error::Config(_))));
        let wide = g.param(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(matches!(g.conv2d(x, wide, zb, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_norm_closed_form() {
        let g = Graph::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let gamma = g.param(t(&[1], &[1.0]));
        let beta = g.param(t(&[1], &[0.0]));
        let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let want: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|v| (v - 2.5) / (1.25f64 + 1e-5).sqrt()).collect();
        close(g.value(y).data(), &want, 1e-12);
        close(&stats.mean, &[2.5], 1e-12);

        let collapse = g.param(t(&[1], &[0.0]));
        let shift = g.param(t(&[1], &[2.5]));
        let (y, _) = g.batch_norm_train(x, collapse, shift, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn batch_norm_infer_with_unit_statistics_is_near_identity() {
        let g = Graph::new();
        let data = Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64 - 7.5);
        let x = g.input(data.clone());
        let gamma = g.param(Tensor::full(&[2], 1.0));
        let beta = g.param(Tensor::zeros(&[2]));
        let y = g.batch_norm_infer(x, gamma, beta, &Tensor::zeros(&[2]), &Tensor::full(&[2], 1.0), 1e-5).unwrap();
        for (a, b) in g.value(y).data().iter().zip(data.data()) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batch_norm_rejects_single_value_channels() {
        let g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, 1, 1]));
        let gamma = g.param(Tensor::full(&[1], 1.0));
        let beta = g.param(Tensor::zeros(&[1]));
        assert!(matches!(g.batch_norm_train(x, gamma, beta, 1e-5), Err(Error::DegenerateStatistics(_))));
    }

    #[test]
    fn activations() {
        let g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(g.value(g.relu(x)).data(), &[0.0, 0.0, 2.0]);
        let s = g.input(t(&[2], &[0.0, 3f64.ln()]));
        close(g.value(g.sigmoid(s)).data(), &[0.5, 0.75], 1e-15);
    }

    #[test]
    fn matmul_examples() {
        let g = Graph::new();
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(g.value(g.matmul(a, b).unwrap()).data(), &[19.0, 22.0, 43.0, 50.0]);
        let z = g.input(Tensor::zeros(&[2, 2]));
        assert!(g.value(g.matmul(z, b).unwrap()).data().iter().all(|&v| v == 0.0));
        let bad = g.input(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.matmul(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let x = g.input(t(&[2], &[0.0, 2f64.ln()]));
        close(g.value(g.softmax(x, 0).unwrap()).data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15);
        let u = g.input(Tensor::full(&[4], 0.3));
        close(g.value(g.softmax(u, 0).unwrap()).data(), &[0.25; 4], 1e-15);
        let raw = [0.3, -1.2, 2.0, 0.7];
        let a = g.input(t(&[4], &raw));
        let shifted: Vec<f64> = raw.iter().map(|v| v + 40.0).collect();
        let b = g.input(t(&[4], &shifted));
        let pa = g.value(g.softmax(a, 0).unwrap()).data().to_vec();
        let pb = g.value(g.softmax(b, 0).unwrap()).data().to_vec();
        close(&pa, &pb, 1e-12);
    }

    #[test]
    fn pooling_and_linear() {
        let g = Graph::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.shape(p), vec![1, 1]);
        assert_eq!(g.value(p).data(), &[2.5]);

        let v = g.input(t(&[1, 2], &[1.0, 2.0]));
        let w = g.param(t(&[2, 2], &[1.0, 1.0, 0.0, 3.0]));
        let b = g.param(t(&[2], &[0.0, 1.0]));
        assert_eq!(g.value(g.linear(v, w, b).unwrap()).data(), &[3.0, 7.0]);
        let zw = g.param(Tensor::zeros(&[2, 2]));
        let bias = g.param(t(&[2], &[1.0, -1.0]));
        let rows = g.input(t(&[3, 2], &[4.0, 5.0, -6.0, 7.0, 8.0, 9.0]));
        assert_eq!(g.value(g.linear(rows, zw, bias).unwrap()).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn relu_adjoint_is_the_sign_mask() {
        let g = Graph::new();
        let x = g.param(t(&[4], &[1.5, -2.0, 0.3, -0.1]));
        let y = g.relu(x);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.raw(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn least_squares_gradient_matches_hand_formula() {
        // ŷ = X·w with two samples; dL/dw = 2·Xᵀ(ŷ−y)/N
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ws = [0.5, -1.0];
        let ys = [1.0, 2.0];
        let g = Graph::new();
        let x = g.input(t(&[2, 2], &xs));
        let w = g.param(t(&[1, 2], &ws));
        let b = g.param(Tensor::zeros(&[1]));
        let target = g.input(t(&[2, 1], &ys));
        let pred = g.linear(x, w, b).unwrap();
        let d = g.sub(pred, target).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap();
        let yhat = [xs[0] * ws[0] + xs[1] * ws[1], xs[2] * ws[0] + xs[3] * ws[1]];
        let r = [yhat[0] - ys[0], yhat[1] - ys[1]];
        let want = [(2.0 * r[0] * xs[0] + 2.0 * r[1] * xs[2]) / 2.0, (2.0 * r[0] * xs[1] + 2.0 * r[1] * xs[3]) / 2.0];
        close(grads.raw(w).unwrap(), &want, 1e-12);
    }

    #[test]
    fn gradients_add_over_repeated_use() {
        let single = |twice: bool| {
            let g = Graph::new();
            let p = g.param(t(&[3], &[0.4, -0.7, 1.1]));
            let a = g.input(t(&[3], &[2.0, 3.0, -1.0]));
            let b = g.input(t(&[3], &[-0.5, 1.5, 4.0]));
            let u = g.mul(p, a).unwrap();
            let mut loss = g.sum(u);
            if twice {
                let v = g.mul(p, b).unwrap();
                let s = g.sum(v);
                loss = g.add(loss, s).unwrap();
            }
            g.backward(loss).unwrap().raw(p).unwrap().to_vec()
        };
        let both = single(true);
        let first = single(false);
        let second: Vec<f64> = vec![-0.5, 1.5, 4.0];
        let sum: Vec<f64> = first.iter().zip(&second).map(|(a, b)| a + b).collect();
        close(&both, &sum, 1e-15);
    }

    #[test]
    fn backward_needs_a_scalar() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_relu_mean_micro_graph_checks() {
        let mut k = 0u32;
        let nudge = |i: usize| {
            let v = ((i * 37 + 11) % 23) as f64 / 11.0 - 1.0;
            if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v }
        };
        let x = Tensor::from_fn(&[1, 2, 4, 4], nudge);
        let w = Tensor::from_fn(&[2, 2, 1, 1], |i| [0.9, -0.4, 0.3, 1.1][i]);
        let b = Tensor::zeros(&[2]);
        // a 1×1 kernel keeps each pre-activation a two-term combination we can
        // audit for distance from the kink
        for n in 0..2 {
            for p in 0..16 {
                let pre = w.data()[n * 2] * x.data()[p] + w.data()[n * 2 + 1] * x.data()[16 + p];
                if pre.abs() < 1e-3 {
                    k += 1;
                }
            }
        }
        assert_eq!(k, 0, "fixture lands on a relu kink");
        let report = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 0)?;
                let r = g.relu(y);
                Ok(g.mean(r))
            },
            &[x, w, b],
            1e-4,
            1e-3,
            64,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
